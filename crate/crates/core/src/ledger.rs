//! In-process simulated public-permissioned ledger: per-interval proof
//! blocks from credential issuers, and an append-only token state machine
//! (FRESH -> ESCROWED -> SPENT) with compare-and-set transitions.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{BlindSignature, SignerTranscript};
use crate::wire::{now_ms, TimestampMs};

/// Digest of the canonical encoding of an unblinded credential.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub [u8; 32]);

impl TokenId {
    pub fn of(credential: &BlindSignature) -> Self {
        TokenId(credential.digest())
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(TokenId(arr))
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenId({self})")
    }
}

impl Serialize for TokenId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for TokenId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        TokenId::from_hex(&raw).ok_or_else(|| serde::de::Error::custom("expected 32-byte hex id"))
    }
}

/// One published blinded-proof record. Rebate blocks annotate the granted
/// amount; credential blocks leave it unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRecord {
    pub transcript: SignerTranscript,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub amount: Option<u64>,
}

/// A signer's per-interval batch of blinded proofs: the anonymity set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofBlock {
    pub cp_id: String,
    pub interval: u64,
    #[serde(with = "crate::wire::hexbytes")]
    pub cp_key_fingerprint: Vec<u8>,
    pub proofs: Vec<ProofRecord>,
    pub sealed_at: TimestampMs,
}

/// Reference handed back on append: (cp_id, interval, record count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub cp_id: String,
    pub interval: u64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenState {
    Fresh,
    Escrowed,
    Spent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStateRecord {
    pub token_id: TokenId,
    pub state: TokenState,
    pub ap_id: String,
    pub recorded_at: TimestampMs,
}

/// Outcome of a compare-and-set escrow attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EscrowOutcome {
    Ok,
    AlreadyEscrowed,
    AlreadySpent,
}

/// Outcome of a compare-and-set spend attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpendOutcome {
    Ok,
    NotEscrowed,
    AlreadySpent,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("block for ({cp_id}, {interval}) already appended")]
    DuplicateBlock { cp_id: String, interval: u64 },
    #[error("invalid block: {0}")]
    InvalidBlock(&'static str),
    #[error("no block for ({cp_id}, {interval})")]
    BlockNotFound { cp_id: String, interval: u64 },
    #[error("ledger persistence failure: {0}")]
    Persistence(#[from] std::io::Error),
}

/// Durable form of one ledger append, for the optional NDJSON log.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum PersistedRecord {
    #[serde(rename = "block")]
    Block(ProofBlock),
    #[serde(rename = "state")]
    State(TokenStateRecord),
}

#[derive(Default)]
struct LedgerState {
    blocks: HashMap<(String, u64), ProofBlock>,
    token_states: HashMap<TokenId, TokenState>,
    state_log: Vec<TokenStateRecord>,
}

/// The simulated ledger. All mutation happens under one lock; the optional
/// commit latency models consensus delay and is applied before the lock is
/// taken so readers are never stalled behind it.
pub struct Ledger {
    state: Mutex<LedgerState>,
    commit_latency: Duration,
    log: Option<Mutex<File>>,
    log_path: Option<PathBuf>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Ledger {
            state: Mutex::new(LedgerState::default()),
            commit_latency: Duration::ZERO,
            log: None,
            log_path: None,
        }
    }

    pub fn with_commit_latency(mut self, latency: Duration) -> Self {
        self.commit_latency = latency;
        self
    }

    /// Attach an append-only NDJSON log, replaying any existing records.
    pub fn with_persistence(path: &Path) -> Result<Self, LedgerError> {
        let ledger = Ledger::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: PersistedRecord = serde_json::from_str(&line)
                    .map_err(|_| LedgerError::InvalidBlock("corrupt persistence record"))?;
                let mut state = ledger.state.lock().unwrap();
                match record {
                    PersistedRecord::Block(block) => {
                        state
                            .blocks
                            .insert((block.cp_id.clone(), block.interval), block);
                    }
                    PersistedRecord::State(rec) => {
                        state.token_states.insert(rec.token_id, rec.state);
                        state.state_log.push(rec);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Ledger {
            log: Some(Mutex::new(file)),
            log_path: Some(path.to_path_buf()),
            ..ledger
        })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn delay(&self) {
        if !self.commit_latency.is_zero() {
            std::thread::sleep(self.commit_latency);
        }
    }

    fn persist(&self, record: &PersistedRecord) -> Result<(), LedgerError> {
        if let Some(log) = &self.log {
            let mut file = log.lock().unwrap();
            serde_json::to_writer(&mut *file, record)
                .map_err(|_| LedgerError::InvalidBlock("unserialisable record"))?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Append a sealed proof block. Exactly one block may exist per
    /// (cp_id, interval); blocks are immutable once in.
    pub fn append_proof_block(&self, block: ProofBlock) -> Result<BlockRef, LedgerError> {
        if block.proofs.is_empty() {
            return Err(LedgerError::InvalidBlock("a proof block needs m >= 1 proofs"));
        }
        if block.cp_key_fingerprint.len() != 32 {
            return Err(LedgerError::InvalidBlock("key fingerprint must be 32 bytes"));
        }
        self.delay();
        let key = (block.cp_id.clone(), block.interval);
        {
            let mut state = self.state.lock().unwrap();
            if state.blocks.contains_key(&key) {
                return Err(LedgerError::DuplicateBlock {
                    cp_id: block.cp_id,
                    interval: block.interval,
                });
            }
            state.blocks.insert(key.clone(), block.clone());
        }
        self.persist(&PersistedRecord::Block(block.clone()))?;
        Ok(BlockRef {
            cp_id: key.0,
            interval: key.1,
            count: block.proofs.len(),
        })
    }

    pub fn get_proof_block(&self, cp_id: &str, interval: u64) -> Result<ProofBlock, LedgerError> {
        let state = self.state.lock().unwrap();
        state
            .blocks
            .get(&(cp_id.to_string(), interval))
            .cloned()
            .ok_or_else(|| LedgerError::BlockNotFound {
                cp_id: cp_id.to_string(),
                interval,
            })
    }

    pub fn record_escrow(&self, token_id: TokenId, ap_id: &str) -> EscrowOutcome {
        self.delay();
        let mut state = self.state.lock().unwrap();
        Self::escrow_locked(&mut state, token_id, ap_id, &mut |rec| {
            let _ = self.persist(&PersistedRecord::State(rec.clone()));
        })
    }

    /// Escrow a whole token vector atomically: either every token moves
    /// FRESH -> ESCROWED or none does, reporting the first conflict.
    pub fn record_escrow_batch(
        &self,
        token_ids: &[TokenId],
        ap_id: &str,
    ) -> Result<(), (TokenId, EscrowOutcome)> {
        self.delay();
        let mut state = self.state.lock().unwrap();
        for id in token_ids {
            match state.token_states.get(id) {
                None => {}
                Some(TokenState::Escrowed) => return Err((*id, EscrowOutcome::AlreadyEscrowed)),
                Some(TokenState::Spent) => return Err((*id, EscrowOutcome::AlreadySpent)),
                Some(TokenState::Fresh) => {}
            }
        }
        for id in token_ids {
            Self::escrow_locked(&mut state, *id, ap_id, &mut |rec| {
                let _ = self.persist(&PersistedRecord::State(rec.clone()));
            });
        }
        Ok(())
    }

    fn escrow_locked(
        state: &mut LedgerState,
        token_id: TokenId,
        ap_id: &str,
        on_commit: &mut dyn FnMut(&TokenStateRecord),
    ) -> EscrowOutcome {
        match state.token_states.get(&token_id) {
            Some(TokenState::Escrowed) => EscrowOutcome::AlreadyEscrowed,
            Some(TokenState::Spent) => EscrowOutcome::AlreadySpent,
            None | Some(TokenState::Fresh) => {
                let record = TokenStateRecord {
                    token_id,
                    state: TokenState::Escrowed,
                    ap_id: ap_id.to_string(),
                    recorded_at: now_ms(),
                };
                state.token_states.insert(token_id, TokenState::Escrowed);
                state.state_log.push(record.clone());
                on_commit(&record);
                EscrowOutcome::Ok
            }
        }
    }

    pub fn record_spend(&self, token_id: TokenId, ap_id: &str) -> SpendOutcome {
        self.delay();
        let mut state = self.state.lock().unwrap();
        match state.token_states.get(&token_id) {
            None | Some(TokenState::Fresh) => SpendOutcome::NotEscrowed,
            Some(TokenState::Spent) => SpendOutcome::AlreadySpent,
            Some(TokenState::Escrowed) => {
                let record = TokenStateRecord {
                    token_id,
                    state: TokenState::Spent,
                    ap_id: ap_id.to_string(),
                    recorded_at: now_ms(),
                };
                state.token_states.insert(token_id, TokenState::Spent);
                state.state_log.push(record.clone());
                let _ = self.persist(&PersistedRecord::State(record));
                SpendOutcome::Ok
            }
        }
    }

    pub fn query_token_state(&self, token_id: &TokenId) -> TokenState {
        let state = self.state.lock().unwrap();
        state
            .token_states
            .get(token_id)
            .copied()
            .unwrap_or(TokenState::Fresh)
    }

    /// All token ids with ESCROWED or SPENT records at or after `since`.
    pub fn snapshot_spent_set(&self, since: TimestampMs) -> Vec<TokenStateRecord> {
        let state = self.state.lock().unwrap();
        state
            .state_log
            .iter()
            .filter(|r| r.recorded_at >= since)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::{generate_group, SignerKeyPair, SignerTranscript, UserBlindingSession};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn token(n: u8) -> TokenId {
        TokenId([n; 32])
    }

    fn sample_transcript(seed: u64) -> (SignerTranscript, Vec<u8>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = generate_group(64, &mut rng).unwrap();
        let key = SignerKeyPair::generate(&params, &mut rng);
        let (mut session, challenge) = key.initial_challenge(&mut rng);
        let (_user, e) =
            UserBlindingSession::initiate(key.public(), b"m", &challenge, &mut rng).unwrap();
        let proof = key.respond(&mut session, &e).unwrap();
        (
            SignerTranscript {
                challenge,
                e,
                proof,
            },
            key.public().fingerprint().to_vec(),
        )
    }

    fn sample_block(cp: &str, interval: u64, m: usize, seed: u64) -> ProofBlock {
        let (transcript, fp) = sample_transcript(seed);
        ProofBlock {
            cp_id: cp.to_string(),
            interval,
            cp_key_fingerprint: fp,
            proofs: (0..m)
                .map(|_| ProofRecord {
                    transcript: transcript.clone(),
                    amount: None,
                })
                .collect(),
            sealed_at: now_ms(),
        }
    }

    #[test]
    fn append_then_get_round_trips() {
        let ledger = Ledger::new();
        let block = sample_block("cp-1", 4, 10, 1);
        ledger.append_proof_block(block.clone()).unwrap();
        let got = ledger.get_proof_block("cp-1", 4).unwrap();
        assert_eq!(got, block);
        assert_eq!(got.proofs.len(), 10);
        // Immutable: a second read is byte-identical.
        let again = ledger.get_proof_block("cp-1", 4).unwrap();
        assert_eq!(serde_json::to_vec(&got).unwrap(), serde_json::to_vec(&again).unwrap());
    }

    #[test]
    fn duplicate_interval_conflicts() {
        let ledger = Ledger::new();
        ledger.append_proof_block(sample_block("cp-1", 9, 1, 2)).unwrap();
        let err = ledger
            .append_proof_block(sample_block("cp-1", 9, 1, 3))
            .unwrap_err();
        assert!(matches!(err, LedgerError::DuplicateBlock { .. }));
    }

    #[test]
    fn empty_block_is_invalid() {
        let ledger = Ledger::new();
        let mut block = sample_block("cp-1", 1, 1, 4);
        block.proofs.clear();
        assert!(matches!(
            ledger.append_proof_block(block),
            Err(LedgerError::InvalidBlock(_))
        ));
    }

    #[test]
    fn absent_interval_is_not_found() {
        let ledger = Ledger::new();
        assert!(matches!(
            ledger.get_proof_block("cp-1", 77),
            Err(LedgerError::BlockNotFound { .. })
        ));
    }

    #[test]
    fn escrow_and_spend_state_machine() {
        let ledger = Ledger::new();
        let id = token(1);
        assert_eq!(ledger.query_token_state(&id), TokenState::Fresh);
        assert_eq!(ledger.record_escrow(id, "ap-1"), EscrowOutcome::Ok);
        assert_eq!(ledger.query_token_state(&id), TokenState::Escrowed);
        assert_eq!(ledger.record_escrow(id, "ap-1"), EscrowOutcome::AlreadyEscrowed);
        assert_eq!(ledger.record_spend(id, "ap-1"), SpendOutcome::Ok);
        assert_eq!(ledger.query_token_state(&id), TokenState::Spent);
        assert_eq!(ledger.record_spend(id, "ap-2"), SpendOutcome::AlreadySpent);
        assert_eq!(ledger.record_escrow(id, "ap-2"), EscrowOutcome::AlreadySpent);
    }

    #[test]
    fn spend_without_escrow_is_rejected() {
        let ledger = Ledger::new();
        assert_eq!(ledger.record_spend(token(2), "ap-1"), SpendOutcome::NotEscrowed);
    }

    #[test]
    fn batch_escrow_is_all_or_nothing() {
        let ledger = Ledger::new();
        let ids = [token(1), token(2), token(3)];
        // Poison one member of the vector.
        assert_eq!(ledger.record_escrow(ids[1], "ap-0"), EscrowOutcome::Ok);
        assert_eq!(ledger.record_spend(ids[1], "ap-0"), SpendOutcome::Ok);
        let err = ledger.record_escrow_batch(&ids, "ap-1").unwrap_err();
        assert_eq!(err, (ids[1], EscrowOutcome::AlreadySpent));
        assert_eq!(ledger.query_token_state(&ids[0]), TokenState::Fresh);
        assert_eq!(ledger.query_token_state(&ids[2]), TokenState::Fresh);

        ledger.record_escrow_batch(&[ids[0], ids[2]], "ap-1").unwrap();
        assert_eq!(ledger.query_token_state(&ids[0]), TokenState::Escrowed);
        assert_eq!(ledger.query_token_state(&ids[2]), TokenState::Escrowed);
    }

    #[test]
    fn concurrent_escrows_yield_exactly_one_success() {
        let ledger = Arc::new(Ledger::new());
        let id = token(7);
        let mut handles = Vec::new();
        for worker in 0..16 {
            let ledger = Arc::clone(&ledger);
            handles.push(std::thread::spawn(move || {
                ledger.record_escrow(id, &format!("ap-{worker}"))
            }));
        }
        let successes = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|o| *o == EscrowOutcome::Ok)
            .count();
        assert_eq!(successes, 1);
    }

    #[test]
    fn snapshot_filters_by_timestamp() {
        let ledger = Ledger::new();
        assert!(ledger.snapshot_spent_set(0).is_empty());
        let t0 = now_ms();
        for n in 0..3 {
            assert_eq!(ledger.record_escrow(token(n), "ap-1"), EscrowOutcome::Ok);
            assert_eq!(ledger.record_spend(token(n), "ap-1"), SpendOutcome::Ok);
        }
        let since_t0 = ledger.snapshot_spent_set(t0);
        assert_eq!(since_t0.len(), 6); // 3 escrows + 3 spends
        let spent: Vec<_> = since_t0
            .iter()
            .filter(|r| r.state == TokenState::Spent)
            .collect();
        assert_eq!(spent.len(), 3);
        // A future timestamp sees nothing.
        assert!(ledger.snapshot_spent_set(now_ms() + 60_000).is_empty());
    }

    #[test]
    fn persistence_replays_blocks_and_states() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.ndjson");
        {
            let ledger = Ledger::with_persistence(&path).unwrap();
            ledger.append_proof_block(sample_block("cp-1", 3, 2, 5)).unwrap();
            assert_eq!(ledger.record_escrow(token(9), "ap-1"), EscrowOutcome::Ok);
        }
        // Each line is a JSON object tagged with its kind.
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(matches!(v["kind"].as_str(), Some("block") | Some("state")));
        }
        let reopened = Ledger::with_persistence(&path).unwrap();
        assert_eq!(reopened.get_proof_block("cp-1", 3).unwrap().proofs.len(), 2);
        assert_eq!(reopened.query_token_state(&token(9)), TokenState::Escrowed);
    }

    #[test]
    fn state_sequences_are_prefixes_of_the_lifecycle() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &proptest::collection::vec((0u8..4, 0u8..3), 1..40),
                |ops| {
                    let ledger = Ledger::new();
                    let mut seen: HashMap<TokenId, Vec<TokenState>> = HashMap::new();
                    for (op, tok) in ops {
                        let id = token(tok);
                        match op {
                            0 => {
                                ledger.record_escrow(id, "ap");
                            }
                            1 => {
                                ledger.record_spend(id, "ap");
                            }
                            _ => {}
                        }
                        let state = ledger.query_token_state(&id);
                        let log = seen.entry(id).or_default();
                        if log.last() != Some(&state) {
                            log.push(state);
                        }
                    }
                    fn rank(s: TokenState) -> u8 {
                        match s {
                            TokenState::Fresh => 0,
                            TokenState::Escrowed => 1,
                            TokenState::Spent => 2,
                        }
                    }
                    for (_, states) in seen {
                        prop_assert!(
                            states.windows(2).all(|w| rank(w[0]) < rank(w[1])),
                            "state sequence {states:?} regressed or repeated"
                        );
                    }
                    Ok(())
                },
            )
            .unwrap();
    }
}
