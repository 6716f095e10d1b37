//! The Authenticating Party: validates credentials and ownership proofs,
//! escrows token vectors on entry, finalises them on exit, blind-signs
//! service nonces, serves proof blocks, and keeps the local spent cache.
//!
//! Escrow hits the ledger synchronously (the ledger's compare-and-set is
//! the serialization point for token state); finalise records are queued
//! and published on a period, which is exactly the cross-AP double-spend
//! window the spent cache narrows.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{
    verify_ownership, BlindSigError, BlindSignature, Challenge, OwnershipProof, Proof,
    SignerKeyPair, SignerPublicKey,
};
use crate::ledger::{
    EscrowOutcome, Ledger, LedgerError, ProofBlock, SpendOutcome, TokenId, TokenState,
};
use crate::token::TokenMessage;
use crate::wire::{now_ms, TimestampMs};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Lifetime of an issued ownership/blind-sign challenge.
    pub challenge_ttl: Duration,
    /// How often the spent cache pulls from the ledger.
    pub sync_period: Duration,
    /// How long finalise records sit in the local queue before they are
    /// published to the ledger.
    pub publication_period: Duration,
    /// Server-side request deadline.
    pub request_timeout: Duration,
    /// Deliberate capacity limit for saturation experiments: a worker pool
    /// of `permits` with a fixed per-request service floor.
    pub capacity: Option<CapacityLimit>,
}

#[derive(Debug, Clone)]
pub struct CapacityLimit {
    pub permits: usize,
    pub service_floor: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            challenge_ttl: Duration::from_secs(30),
            sync_period: Duration::from_secs(5),
            publication_period: Duration::from_secs(5),
            request_timeout: Duration::from_secs(60),
            capacity: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChallengePurpose {
    Entry,
    Exit,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown or expired challenge")]
    UnknownChallenge,
    #[error("challenge already answered")]
    ChallengeConsumed,
    #[error("challenge purpose mismatch")]
    PurposeMismatch,
    #[error("a token vector needs at least one token")]
    EmptyVector,
    #[error("duplicate token inside one vector")]
    DuplicateInVector,
    #[error("token {index}: {reason}")]
    InvalidToken { index: usize, reason: String },
    #[error("credential rejected for token {0}")]
    CredentialRejected(usize),
    #[error("ownership proof rejected for token {0}")]
    OwnershipRejected(usize),
    #[error("token {token_id} is not fresh: {state:?}")]
    NotFresh { token_id: TokenId, state: TokenState },
    #[error("token {token_id} is not escrowed")]
    NotEscrowed { token_id: TokenId },
    #[error("double-spend attempt on token {token_id}")]
    DoubleSpend { token_id: TokenId },
    #[error("no key known for issuer {cp_id} interval {interval}")]
    UnknownIssuer { cp_id: String, interval: u64 },
    #[error(transparent)]
    Crypto(#[from] BlindSigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("issuer key fetch failed: {0}")]
    Directory(String),
}

/// Where the gateway learns issuer keys: a static set (tests) or the
/// issuers' key-distribution endpoints.
pub enum CpDirectory {
    Static(HashMap<(String, u64), SignerPublicKey>),
    Http {
        registry: HashMap<String, String>,
        client: reqwest::Client,
    },
}

impl CpDirectory {
    pub fn static_single(cp_id: &str, interval: u64, key: SignerPublicKey) -> Self {
        let mut map = HashMap::new();
        map.insert((cp_id.to_string(), interval), key);
        CpDirectory::Static(map)
    }

    pub fn http(registry: HashMap<String, String>) -> Self {
        CpDirectory::Http {
            registry,
            client: reqwest::Client::new(),
        }
    }

    async fn fetch(&self, cp_id: &str, interval: u64) -> Result<SignerPublicKey, GatewayError> {
        match self {
            CpDirectory::Static(map) => map
                .get(&(cp_id.to_string(), interval))
                .cloned()
                .ok_or_else(|| GatewayError::UnknownIssuer {
                    cp_id: cp_id.to_string(),
                    interval,
                }),
            CpDirectory::Http { registry, client } => {
                let base = registry.get(cp_id).ok_or_else(|| GatewayError::UnknownIssuer {
                    cp_id: cp_id.to_string(),
                    interval,
                })?;
                let url = format!("{base}/keys/{interval}");
                let resp = client
                    .get(&url)
                    .send()
                    .await
                    .map_err(|e| GatewayError::Directory(e.to_string()))?;
                if !resp.status().is_success() {
                    return Err(GatewayError::UnknownIssuer {
                        cp_id: cp_id.to_string(),
                        interval,
                    });
                }
                let body: crate::issuer::http::KeyResponse = resp
                    .json()
                    .await
                    .map_err(|e| GatewayError::Directory(e.to_string()))?;
                Ok(body.key)
            }
        }
    }
}

struct PendingChallenge {
    purpose: ChallengePurpose,
    ownership_challenge: [u8; 32],
    /// Taken exactly once when the challenge is answered.
    session: Option<crate::blindsig::SignerSession>,
    issued_at: TimestampMs,
}

/// Open escrow entry: the token vector plus a unique tag derived from the
/// blinded signing transcript the AP produced for it.
#[derive(Debug, Clone, Serialize)]
pub struct EscrowEntry {
    pub token_ids: Vec<TokenId>,
    #[serde(with = "crate::wire::hexbytes")]
    pub session_tag: Vec<u8>,
    pub created_at: TimestampMs,
}

#[derive(Default)]
struct SpentCache {
    spent: HashSet<TokenId>,
    escrowed: HashSet<TokenId>,
    last_sync: TimestampMs,
}

struct GatewayState {
    challenges: HashMap<String, PendingChallenge>,
    entries: Vec<EscrowEntry>,
    /// Tokens this AP has finalised locally but not yet published.
    pending_finalises: Vec<TokenId>,
    locally_spent: HashSet<TokenId>,
    cache: SpentCache,
    cp_keys: HashMap<(String, u64), SignerPublicKey>,
}

pub struct Gateway {
    ap_id: String,
    key: SignerKeyPair,
    ledger: Arc<Ledger>,
    directory: CpDirectory,
    config: GatewayConfig,
    state: Mutex<GatewayState>,
    rng: Mutex<ChaCha20Rng>,
}

/// One token presented at entry or exit: the credential, the message it
/// signs, where it was issued, and the ownership proof for the key bound
/// into the message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenPresentation {
    pub cp_id: String,
    pub interval: u64,
    #[serde(with = "crate::wire::hexbytes")]
    pub message: Vec<u8>,
    pub credential: BlindSignature,
    pub ownership_proof: OwnershipProof,
}

/// Receipt for one token's ledger transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenReceipt {
    pub token_id: TokenId,
    pub state: String,
    pub recorded_at: TimestampMs,
}

#[derive(Debug)]
pub struct EntryOutcome {
    pub proof: Proof,
    pub entry_ref: String,
    pub receipts: Vec<TokenReceipt>,
}

#[derive(Debug)]
pub struct ExitOutcome {
    pub proof: Proof,
    pub exit_ref: String,
    pub receipts: Vec<TokenReceipt>,
}

impl Gateway {
    pub fn new(
        ap_id: impl Into<String>,
        key: SignerKeyPair,
        ledger: Arc<Ledger>,
        directory: CpDirectory,
        config: GatewayConfig,
        seed: Option<u64>,
    ) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Gateway {
            ap_id: ap_id.into(),
            key,
            ledger,
            directory,
            config,
            state: Mutex::new(GatewayState {
                challenges: HashMap::new(),
                entries: Vec::new(),
                pending_finalises: Vec::new(),
                locally_spent: HashSet::new(),
                cache: SpentCache::default(),
                cp_keys: HashMap::new(),
            }),
            rng: Mutex::new(rng),
        }
    }

    pub fn ap_id(&self) -> &str {
        &self.ap_id
    }

    pub fn public_key(&self) -> &SignerPublicKey {
        self.key.public()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Relay a ledger block unmodified.
    pub fn serve_proof_block(
        &self,
        cp_id: &str,
        interval: u64,
    ) -> Result<ProofBlock, GatewayError> {
        Ok(self.ledger.get_proof_block(cp_id, interval)?)
    }

    /// Open a blind-sign session for a service nonce ([y] at entry, [z] at
    /// exit) plus a fresh ownership challenge, both bound to one id.
    pub fn open_challenge(&self, purpose: ChallengePurpose) -> (String, [u8; 32], Challenge) {
        let mut rng = self.rng.lock().unwrap();
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        let mut ownership_challenge = [0u8; 32];
        rng.fill_bytes(&mut ownership_challenge);
        let (session, challenge) = self.key.initial_challenge(&mut *rng);
        drop(rng);
        let id = hex::encode(id);
        let mut state = self.state.lock().unwrap();
        state.challenges.insert(
            id.clone(),
            PendingChallenge {
                purpose,
                ownership_challenge,
                session: Some(session),
                issued_at: now_ms(),
            },
        );
        (id, ownership_challenge, challenge)
    }

    pub fn challenge_expiry(&self) -> Duration {
        self.config.challenge_ttl
    }

    async fn issuer_key(
        &self,
        cp_id: &str,
        interval: u64,
    ) -> Result<SignerPublicKey, GatewayError> {
        {
            let state = self.state.lock().unwrap();
            if let Some(key) = state.cp_keys.get(&(cp_id.to_string(), interval)) {
                return Ok(key.clone());
            }
        }
        let key = self.directory.fetch(cp_id, interval).await?;
        let mut state = self.state.lock().unwrap();
        state
            .cp_keys
            .insert((cp_id.to_string(), interval), key.clone());
        Ok(key)
    }

    /// Validate a presented token end to end: the credential must verify
    /// under the issuing interval key and the ownership proof must match
    /// the key bound into the token message.
    async fn validate_presentation(
        &self,
        index: usize,
        token: &TokenPresentation,
        ownership_challenge: &[u8],
    ) -> Result<TokenId, GatewayError> {
        let message = TokenMessage::decode(&token.message).map_err(|e| {
            GatewayError::InvalidToken {
                index,
                reason: e.to_string(),
            }
        })?;
        if message.interval != token.interval {
            return Err(GatewayError::InvalidToken {
                index,
                reason: "message interval does not match claimed interval".into(),
            });
        }
        let issuer_key = self.issuer_key(&token.cp_id, token.interval).await?;
        if !issuer_key.verify(&token.message, &token.credential) {
            return Err(GatewayError::CredentialRejected(index));
        }
        if !verify_ownership(
            &issuer_key.params,
            &message.owner_public,
            ownership_challenge,
            &token.ownership_proof,
        ) {
            return Err(GatewayError::OwnershipRejected(index));
        }
        Ok(TokenId::of(&token.credential))
    }

    fn take_challenge(
        &self,
        challenge_id: &str,
        purpose: ChallengePurpose,
        e: &BigUint,
    ) -> Result<crate::blindsig::SignerSession, GatewayError> {
        if !self.key.public().params.is_scalar(e) {
            return Err(GatewayError::Crypto(BlindSigError::ScalarOutOfRange));
        }
        let mut state = self.state.lock().unwrap();
        let pending = state
            .challenges
            .get_mut(challenge_id)
            .ok_or(GatewayError::UnknownChallenge)?;
        if pending.purpose != purpose {
            return Err(GatewayError::PurposeMismatch);
        }
        let age = now_ms().saturating_sub(pending.issued_at);
        if age > self.config.challenge_ttl.as_millis() as u64 {
            return Err(GatewayError::UnknownChallenge);
        }
        pending.session.take().ok_or(GatewayError::ChallengeConsumed)
    }

    fn ownership_challenge_for(
        &self,
        challenge_id: &str,
        purpose: ChallengePurpose,
    ) -> Result<[u8; 32], GatewayError> {
        let state = self.state.lock().unwrap();
        let pending = state
            .challenges
            .get(challenge_id)
            .ok_or(GatewayError::UnknownChallenge)?;
        if pending.session.is_none() {
            return Err(GatewayError::ChallengeConsumed);
        }
        if pending.purpose != purpose {
            return Err(GatewayError::PurposeMismatch);
        }
        let age = now_ms().saturating_sub(pending.issued_at);
        if age > self.config.challenge_ttl.as_millis() as u64 {
            return Err(GatewayError::UnknownChallenge);
        }
        Ok(pending.ownership_challenge)
    }

    /// Unique tag for an answered blind-sign session.
    fn session_tag(rnd: &[u8], e: &BigUint, proof: &Proof) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut buf = crate::blindsig::ConcatBuf::new();
        buf.push_bytes(b"ap-session-tag-v1")
            .push_bytes(rnd)
            .push_int(e)
            .push_int(&proof.r)
            .push_int(&proof.c)
            .push_int(&proof.s1)
            .push_int(&proof.s2)
            .push_int(&proof.d);
        let mut h = Sha256::new();
        h.update(buf.as_bytes());
        h.finalize().into()
    }

    /// Entry: prove-owner + escrow folded into one validation step, then the
    /// blind signature over the service nonce. All-or-nothing over the token
    /// vector; no signature is issued unless every check and the ledger
    /// commit succeed.
    pub async fn entry(
        &self,
        challenge_id: &str,
        tokens: &[TokenPresentation],
        e: &BigUint,
    ) -> Result<EntryOutcome, GatewayError> {
        if tokens.is_empty() {
            return Err(GatewayError::EmptyVector);
        }
        let ownership_challenge =
            self.ownership_challenge_for(challenge_id, ChallengePurpose::Entry)?;
        let mut token_ids = Vec::with_capacity(tokens.len());
        for (index, token) in tokens.iter().enumerate() {
            let id = self
                .validate_presentation(index, token, &ownership_challenge)
                .await?;
            token_ids.push(id);
        }
        // Duplicate ids inside one vector are a self-collision.
        {
            let mut sorted = token_ids.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != token_ids.len() {
                return Err(GatewayError::DuplicateInVector);
            }
        }
        // Consume the blind-sign session first so a raced challenge cannot
        // leak an escrow with no ticket, then commit, then sign.
        let mut session = self.take_challenge(challenge_id, ChallengePurpose::Entry, e)?;
        // Atomic escrow of the whole vector; the ledger CAS serialises
        // racing entries.
        if let Err((token_id, outcome)) = self.ledger.record_escrow_batch(&token_ids, &self.ap_id)
        {
            return Err(match outcome {
                EscrowOutcome::AlreadySpent => GatewayError::NotFresh {
                    token_id,
                    state: TokenState::Spent,
                },
                _ => GatewayError::NotFresh {
                    token_id,
                    state: TokenState::Escrowed,
                },
            });
        }
        // State committed; now produce the signature.
        let proof = self.key.respond(&mut session, e)?;
        let session_tag = Self::session_tag(&session.rnd, e, &proof).to_vec();
        let entry_ref = hex::encode(&session_tag[..16]);
        let now = now_ms();
        let receipts: Vec<TokenReceipt> = token_ids
            .iter()
            .map(|id| TokenReceipt {
                token_id: *id,
                state: "ESCROWED".to_string(),
                recorded_at: now,
            })
            .collect();
        let mut state = self.state.lock().unwrap();
        for id in &token_ids {
            state.cache.escrowed.insert(*id);
        }
        state.entries.push(EscrowEntry {
            token_ids,
            session_tag,
            created_at: now,
        });
        Ok(EntryOutcome {
            proof,
            entry_ref,
            receipts,
        })
    }

    /// Exit: re-validate the credentials and ownership, deny double spends
    /// from the local view, mark the vector spent locally, queue the
    /// finalise records for publication, and sign the exit nonce.
    pub async fn exit(
        &self,
        challenge_id: &str,
        tokens: &[TokenPresentation],
        e: &BigUint,
    ) -> Result<ExitOutcome, GatewayError> {
        if tokens.is_empty() {
            return Err(GatewayError::EmptyVector);
        }
        let ownership_challenge =
            self.ownership_challenge_for(challenge_id, ChallengePurpose::Exit)?;
        let mut token_ids = Vec::with_capacity(tokens.len());
        for (index, token) in tokens.iter().enumerate() {
            let id = self
                .validate_presentation(index, token, &ownership_challenge)
                .await?;
            token_ids.push(id);
        }
        let mut session = self.take_challenge(challenge_id, ChallengePurpose::Exit, e)?;
        // Local double-spend screen plus ledger state check, then atomic
        // local commitment of the whole vector.
        {
            let mut state = self.state.lock().unwrap();
            for id in &token_ids {
                if state.locally_spent.contains(id) || state.cache.spent.contains(id) {
                    return Err(GatewayError::DoubleSpend { token_id: *id });
                }
            }
            for id in &token_ids {
                match self.ledger.query_token_state(id) {
                    TokenState::Escrowed => {}
                    TokenState::Fresh => {
                        return Err(GatewayError::NotEscrowed { token_id: *id })
                    }
                    TokenState::Spent => {
                        return Err(GatewayError::DoubleSpend { token_id: *id })
                    }
                }
            }
            for id in &token_ids {
                state.locally_spent.insert(*id);
                state.pending_finalises.push(*id);
            }
        }
        let proof = self.key.respond(&mut session, e)?;
        let exit_ref = hex::encode(&Self::session_tag(&session.rnd, e, &proof)[..16]);
        let now = now_ms();
        let receipts = token_ids
            .iter()
            .map(|id| TokenReceipt {
                token_id: *id,
                state: "SPENT".to_string(),
                recorded_at: now,
            })
            .collect();
        Ok(ExitOutcome {
            proof,
            exit_ref,
            receipts,
        })
    }

    /// Push queued finalise records to the ledger. Returns how many were
    /// published; records that lost a cross-AP race surface as conflicts
    /// in the ledger and are dropped from the queue either way.
    pub fn publish_pending_finalises(&self) -> usize {
        let drained: Vec<TokenId> = {
            let mut state = self.state.lock().unwrap();
            state.pending_finalises.drain(..).collect()
        };
        let mut published = 0;
        for id in &drained {
            match self.ledger.record_spend(*id, &self.ap_id) {
                SpendOutcome::Ok => published += 1,
                SpendOutcome::AlreadySpent | SpendOutcome::NotEscrowed => {}
            }
        }
        published
    }

    /// Pull the ledger's escrow/spend records since the last sync into the
    /// local cache. Returns the number of new entries.
    pub fn sync_spent_cache(&self) -> usize {
        let since = {
            let state = self.state.lock().unwrap();
            state.cache.last_sync
        };
        let records = self.ledger.snapshot_spent_set(since);
        let mut state = self.state.lock().unwrap();
        let mut new_entries = 0;
        let mut max_seen = state.cache.last_sync;
        for record in records {
            let inserted = match record.state {
                TokenState::Spent => state.cache.spent.insert(record.token_id),
                TokenState::Escrowed => state.cache.escrowed.insert(record.token_id),
                TokenState::Fresh => false,
            };
            if inserted {
                new_entries += 1;
            }
            max_seen = max_seen.max(record.recorded_at);
        }
        state.cache.last_sync = max_seen;
        new_entries
    }

    pub fn cache_spent_contains(&self, id: &TokenId) -> bool {
        self.state.lock().unwrap().cache.spent.contains(id)
    }

    pub fn open_entries(&self) -> Vec<EscrowEntry> {
        self.state.lock().unwrap().entries.clone()
    }

    pub fn pending_finalise_count(&self) -> usize {
        self.state.lock().unwrap().pending_finalises.len()
    }
}

/// HTTP surface: GET /key, GET /blocks/{cp}/{interval},
/// POST /entry/challenge, POST /entry, POST /exit, POST /admin/sync.
pub mod http {
    use super::*;
    use crate::httpapi::{timeout_middleware, ApiError, ApiResult};
    use axum::extract::{Path, State};
    use axum::routing::{get, post};
    use axum::{middleware, Json, Router};
    use tokio::sync::Semaphore;

    #[derive(Clone)]
    struct AppState {
        gateway: Arc<Gateway>,
        capacity: Option<Arc<(Semaphore, Duration)>>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct KeyResponse {
        pub ap_id: String,
        #[serde(flatten)]
        pub key: SignerPublicKey,
        #[serde(with = "crate::wire::hexbytes")]
        pub fingerprint: Vec<u8>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ChallengeRequest {
        pub purpose: ChallengePurpose,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ChallengeResponse {
        pub challenge_id: String,
        pub ap_id: String,
        #[serde(with = "crate::wire::hexbytes")]
        pub key_fingerprint: Vec<u8>,
        #[serde(with = "crate::wire::hexbytes")]
        pub ownership_challenge: Vec<u8>,
        pub blind: Challenge,
        pub expires_at_ms: TimestampMs,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct EntryRequest {
        pub challenge_id: String,
        pub tokens: Vec<TokenPresentation>,
        #[serde(with = "crate::wire::hexnum")]
        pub e: BigUint,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct EntryResponse {
        pub entry_ref: String,
        pub proof: Proof,
        pub escrowed: Vec<TokenReceipt>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ExitResponse {
        pub exit_ref: String,
        pub proof: Proof,
        pub spent: Vec<TokenReceipt>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SyncResponse {
        pub published_finalises: usize,
        pub new_cache_entries: usize,
    }

    impl From<GatewayError> for ApiError {
        fn from(err: GatewayError) -> Self {
            match &err {
                GatewayError::UnknownChallenge => ApiError::not_found("unknown-challenge", err.to_string()),
                GatewayError::ChallengeConsumed => ApiError::conflict("challenge-consumed", err.to_string()),
                GatewayError::PurposeMismatch
                | GatewayError::EmptyVector
                | GatewayError::DuplicateInVector
                | GatewayError::InvalidToken { .. } => {
                    ApiError::bad_request("bad-parameters", err.to_string())
                }
                GatewayError::CredentialRejected(_) | GatewayError::OwnershipRejected(_) => {
                    ApiError::forbidden("rejected", err.to_string())
                }
                GatewayError::NotFresh { .. } | GatewayError::NotEscrowed { .. } => {
                    ApiError::conflict("token-state", err.to_string())
                }
                GatewayError::DoubleSpend { .. } => {
                    ApiError::conflict("double-spend", err.to_string())
                }
                GatewayError::UnknownIssuer { .. } => {
                    ApiError::bad_request("unknown-issuer", err.to_string())
                }
                GatewayError::Crypto(_) => ApiError::bad_request("crypto", err.to_string()),
                GatewayError::Ledger(LedgerError::BlockNotFound { .. }) => {
                    ApiError::not_found("block-not-found", err.to_string())
                }
                GatewayError::Ledger(_) | GatewayError::Directory(_) => {
                    ApiError::internal(err.to_string())
                }
            }
        }
    }

    pub fn router(gateway: Arc<Gateway>) -> Router {
        let request_timeout = gateway.config().request_timeout;
        let capacity = gateway
            .config()
            .capacity
            .as_ref()
            .map(|c| Arc::new((Semaphore::new(c.permits), c.service_floor)));
        let state = AppState { gateway, capacity };
        Router::new()
            .route("/key", get(key))
            .route("/blocks/{cp}/{interval}", get(block))
            .route("/entry/challenge", post(challenge))
            .route("/entry", post(entry))
            .route("/exit", post(exit))
            .route("/admin/sync", post(sync))
            .layer(middleware::from_fn(move |req, next| {
                timeout_middleware(request_timeout, req, next)
            }))
            .with_state(state)
    }

    async fn key(State(state): State<AppState>) -> ApiResult<KeyResponse> {
        let gateway = &state.gateway;
        Ok(Json(KeyResponse {
            ap_id: gateway.ap_id().to_string(),
            key: gateway.public_key().clone(),
            fingerprint: gateway.public_key().fingerprint().to_vec(),
        }))
    }

    async fn block(
        State(state): State<AppState>,
        Path((cp, interval)): Path<(String, u64)>,
    ) -> ApiResult<ProofBlock> {
        Ok(Json(state.gateway.serve_proof_block(&cp, interval)?))
    }

    async fn challenge(
        State(state): State<AppState>,
        Json(req): Json<ChallengeRequest>,
    ) -> ApiResult<ChallengeResponse> {
        let gateway = &state.gateway;
        let (challenge_id, ownership_challenge, blind) = gateway.open_challenge(req.purpose);
        Ok(Json(ChallengeResponse {
            challenge_id,
            ap_id: gateway.ap_id().to_string(),
            key_fingerprint: gateway.public_key().fingerprint().to_vec(),
            ownership_challenge: ownership_challenge.to_vec(),
            blind,
            expires_at_ms: now_ms() + gateway.challenge_expiry().as_millis() as u64,
        }))
    }

    async fn entry(
        State(state): State<AppState>,
        Json(req): Json<EntryRequest>,
    ) -> ApiResult<EntryResponse> {
        // The deliberate capacity bottleneck for saturation experiments.
        let _permit;
        if let Some(cap) = &state.capacity {
            _permit = cap.0.acquire().await.expect("semaphore never closed");
            tokio::time::sleep(cap.1).await;
        }
        let outcome = state
            .gateway
            .entry(&req.challenge_id, &req.tokens, &req.e)
            .await?;
        Ok(Json(EntryResponse {
            entry_ref: outcome.entry_ref,
            proof: outcome.proof,
            escrowed: outcome.receipts,
        }))
    }

    async fn exit(
        State(state): State<AppState>,
        Json(req): Json<EntryRequest>,
    ) -> ApiResult<ExitResponse> {
        let outcome = state
            .gateway
            .exit(&req.challenge_id, &req.tokens, &req.e)
            .await?;
        Ok(Json(ExitResponse {
            exit_ref: outcome.exit_ref,
            proof: outcome.proof,
            spent: outcome.receipts,
        }))
    }

    async fn sync(State(state): State<AppState>) -> ApiResult<SyncResponse> {
        let published = state.gateway.publish_pending_finalises();
        let pulled = state.gateway.sync_spent_cache();
        Ok(Json(SyncResponse {
            published_finalises: published,
            new_cache_entries: pulled,
        }))
    }
}
