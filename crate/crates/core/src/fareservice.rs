//! The Service (fare gate): issues entry/exit nonces tagged with station
//! identity, admits on AP(y), closes journeys on finish AP(y), computes
//! rebates from the entry/exit station pair, and blind-signs rebate
//! credentials that are published to the ledger like any other proof block.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{
    BlindSigError, BlindSignature, Challenge, ConcatBuf, Proof, SignerKeyPair, SignerPublicKey,
    SignerSession, SignerTranscript,
};
use crate::ledger::{BlockRef, Ledger, LedgerError, ProofBlock, ProofRecord};
use crate::wire::{now_ms, TimestampMs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "ENTRY")]
    Entry,
    #[serde(rename = "EXIT")]
    Exit,
}

/// A single-use gate nonce. The canonical byte form is what the AP blind-
/// signs and what the service later verifies the signature against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FareNonce {
    #[serde(with = "crate::wire::hexbytes")]
    pub nonce: Vec<u8>,
    pub station_id: String,
    pub direction: Direction,
    pub issued_at: TimestampMs,
}

impl FareNonce {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = ConcatBuf::new();
        buf.push_bytes(b"fare-nonce-v1")
            .push_bytes(&self.nonce)
            .push_bytes(self.station_id.as_bytes())
            .push_bytes(match self.direction {
                Direction::Entry => b"ENTRY",
                Direction::Exit => b"EXIT",
            })
            .push_bytes(&self.issued_at.to_be_bytes());
        buf.as_bytes().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JourneyState {
    Open,
    Closing,
    Closed,
}

/// Per-journey state. Deliberately free of credentials, token ids, and any
/// issuer-related value: the only link to the user is the digest of AP(y).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JourneySession {
    #[serde(with = "crate::wire::hexbytes")]
    pub entry_tag: Vec<u8>,
    pub entry_station: String,
    pub entry_time: TimestampMs,
    pub state: JourneyState,
    pub exit_station: Option<String>,
}

/// Fare lookup: total over all configured station pairs, every fare at most
/// `max_fare`.
#[derive(Debug, Clone)]
pub struct FareTable {
    fares: HashMap<(String, String), u64>,
    stations: Vec<String>,
    max_fare: u64,
}

#[derive(Debug, Error)]
pub enum FareTableError {
    #[error("csv parse failure at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("fare {fare} for ({entry},{exit}) exceeds max_fare {max_fare}")]
    FareAboveMax {
        entry: String,
        exit: String,
        fare: u64,
        max_fare: u64,
    },
    #[error("fare table is not total: missing ({entry},{exit})")]
    MissingPair { entry: String, exit: String },
}

impl FareTable {
    /// Load from CSV with header `entry,exit,fare`; max_fare is a separate
    /// config value.
    pub fn from_csv<R: Read>(reader: R, max_fare: u64) -> Result<Self, FareTableError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut fares = HashMap::new();
        let mut stations: HashSet<String> = HashSet::new();
        for (idx, row) in rdr.records().enumerate() {
            let line = idx + 2; // header is line 1
            let row = row.map_err(|e| FareTableError::Parse {
                line,
                reason: e.to_string(),
            })?;
            if row.len() != 3 {
                return Err(FareTableError::Parse {
                    line,
                    reason: format!("expected 3 fields, got {}", row.len()),
                });
            }
            let entry = row[0].trim().to_string();
            let exit = row[1].trim().to_string();
            let fare: u64 = row[2].trim().parse().map_err(|e| FareTableError::Parse {
                line,
                reason: format!("bad fare: {e}"),
            })?;
            if fare > max_fare {
                return Err(FareTableError::FareAboveMax {
                    entry,
                    exit,
                    fare,
                    max_fare,
                });
            }
            stations.insert(entry.clone());
            stations.insert(exit.clone());
            fares.insert((entry, exit), fare);
        }
        let mut stations: Vec<String> = stations.into_iter().collect();
        stations.sort();
        for a in &stations {
            for b in &stations {
                if !fares.contains_key(&(a.clone(), b.clone())) {
                    return Err(FareTableError::MissingPair {
                        entry: a.clone(),
                        exit: b.clone(),
                    });
                }
            }
        }
        Ok(FareTable {
            fares,
            stations,
            max_fare,
        })
    }

    /// Uniform flat-fare table over the given stations.
    pub fn flat(stations: &[&str], fare: u64, max_fare: u64) -> Self {
        assert!(fare <= max_fare);
        let mut fares = HashMap::new();
        for a in stations {
            for b in stations {
                fares.insert((a.to_string(), b.to_string()), fare);
            }
        }
        FareTable {
            fares,
            stations: stations.iter().map(|s| s.to_string()).collect(),
            max_fare,
        }
    }

    pub fn max_fare(&self) -> u64 {
        self.max_fare
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn fare(&self, entry: &str, exit: &str) -> Option<u64> {
        self.fares.get(&(entry.to_string(), exit.to_string())).copied()
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown or already used nonce")]
    UnknownNonce,
    #[error("nonce direction mismatch")]
    DirectionMismatch,
    #[error("untrusted authenticating party {0}")]
    UntrustedAp(String),
    #[error("signature rejected")]
    SignatureRejected,
    #[error("no open journey for that tag")]
    NoOpenJourney,
    #[error("journey expired")]
    JourneyExpired,
    #[error("unknown settlement")]
    UnknownSettlement,
    #[error("settlement already completed")]
    SettlementReplayed,
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("nothing queued for rebate interval {0}")]
    NothingToPublish(u64),
    #[error(transparent)]
    Crypto(#[from] BlindSigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

struct PendingSettle {
    session_tag: Vec<u8>,
    exit_nonce: FareNonce,
    rebate_amount: u64,
    rebate_interval: u64,
    signer_session: SignerSession,
    rebate_challenge: Challenge,
    consumed: bool,
}

struct ServiceState {
    pending_nonces: HashMap<String, FareNonce>,
    sessions: HashMap<String, JourneySession>,
    settles: HashMap<String, PendingSettle>,
    rebate_queues: HashMap<u64, Vec<ProofRecord>>,
}

pub struct FareService {
    service_id: String,
    fare_table: FareTable,
    trusted_aps: HashMap<String, SignerPublicKey>,
    rebate_key: SignerKeyPair,
    rebate_interval_secs: u64,
    journey_timeout: Duration,
    ledger: Arc<Ledger>,
    state: Mutex<ServiceState>,
    rng: Mutex<ChaCha20Rng>,
}

#[derive(Debug)]
pub struct FinishOutcome {
    pub exit_nonce: FareNonce,
    pub rebate_amount: u64,
    pub rebate_interval: u64,
    pub rebate_challenge: Challenge,
    pub settle_id: String,
}

#[derive(Debug)]
pub struct SettleOutcome {
    pub rebate_proof: Proof,
    pub rebate_amount: u64,
}

impl FareService {
    pub fn new(
        service_id: impl Into<String>,
        fare_table: FareTable,
        rebate_key: SignerKeyPair,
        ledger: Arc<Ledger>,
        rebate_interval_secs: u64,
        journey_timeout: Duration,
        seed: Option<u64>,
    ) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        FareService {
            service_id: service_id.into(),
            fare_table,
            trusted_aps: HashMap::new(),
            rebate_key,
            rebate_interval_secs,
            journey_timeout,
            ledger,
            state: Mutex::new(ServiceState {
                pending_nonces: HashMap::new(),
                sessions: HashMap::new(),
                settles: HashMap::new(),
                rebate_queues: HashMap::new(),
            }),
            rng: Mutex::new(rng),
        }
    }

    pub fn service_id(&self) -> &str {
        &self.service_id
    }

    /// The identity under which rebate proof blocks are published.
    pub fn rebate_cp_id(&self) -> String {
        format!("{}-rebate", self.service_id)
    }

    pub fn rebate_public_key(&self) -> &SignerPublicKey {
        self.rebate_key.public()
    }

    pub fn current_rebate_interval(&self) -> u64 {
        (now_ms() / 1000) / self.rebate_interval_secs
    }

    pub fn trust_ap(&mut self, ap_id: impl Into<String>, key: SignerPublicKey) {
        self.trusted_aps.insert(ap_id.into(), key);
    }

    pub fn fare_table(&self) -> &FareTable {
        &self.fare_table
    }

    /// Fresh single-use nonce, recorded pending until presented.
    pub fn issue_nonce(&self, direction: Direction, station_id: &str) -> Result<FareNonce, ServiceError> {
        if !self.fare_table.stations().iter().any(|s| s == station_id) {
            return Err(ServiceError::UnknownStation(station_id.to_string()));
        }
        let mut rng = self.rng.lock().unwrap();
        let mut nonce = vec![0u8; 32];
        rng.fill_bytes(&mut nonce);
        drop(rng);
        let fare_nonce = FareNonce {
            nonce: nonce.clone(),
            station_id: station_id.to_string(),
            direction,
            issued_at: now_ms(),
        };
        let mut state = self.state.lock().unwrap();
        state
            .pending_nonces
            .insert(hex::encode(&nonce), fare_nonce.clone());
        Ok(fare_nonce)
    }

    pub fn nonce_is_pending(&self, nonce_hex: &str) -> bool {
        self.state.lock().unwrap().pending_nonces.contains_key(nonce_hex)
    }

    fn verify_ap_signature(
        &self,
        ap_id: &str,
        message: &[u8],
        signature: &BlindSignature,
    ) -> Result<(), ServiceError> {
        let key = self
            .trusted_aps
            .get(ap_id)
            .ok_or_else(|| ServiceError::UntrustedAp(ap_id.to_string()))?;
        if !key.verify(message, signature) {
            return Err(ServiceError::SignatureRejected);
        }
        Ok(())
    }

    /// Admit on AP(y): consume the nonce and open a journey keyed by the
    /// digest of the presented signature.
    pub fn admit_entry(
        &self,
        nonce_hex: &str,
        ap_id: &str,
        signature: &BlindSignature,
    ) -> Result<JourneySession, ServiceError> {
        let fare_nonce = {
            let state = self.state.lock().unwrap();
            state
                .pending_nonces
                .get(nonce_hex)
                .cloned()
                .ok_or(ServiceError::UnknownNonce)?
        };
        if fare_nonce.direction != Direction::Entry {
            return Err(ServiceError::DirectionMismatch);
        }
        self.verify_ap_signature(ap_id, &fare_nonce.canonical_bytes(), signature)?;
        let entry_tag = signature.digest().to_vec();
        let session = JourneySession {
            entry_tag: entry_tag.clone(),
            entry_station: fare_nonce.station_id.clone(),
            entry_time: now_ms(),
            state: JourneyState::Open,
            exit_station: None,
        };
        let mut state = self.state.lock().unwrap();
        // Single-use under concurrency: removal is the commit point.
        if state.pending_nonces.remove(nonce_hex).is_none() {
            return Err(ServiceError::UnknownNonce);
        }
        state.sessions.insert(hex::encode(&entry_tag), session.clone());
        Ok(session)
    }

    /// Close-out step: presenting AP(y) moves the journey to CLOSING and
    /// yields the exit nonce plus the rebate blind-sign challenge.
    pub fn finish(
        &self,
        exit_station: &str,
        signature_y: &BlindSignature,
    ) -> Result<FinishOutcome, ServiceError> {
        let tag_hex = hex::encode(signature_y.digest());
        let entry_station;
        {
            let mut state = self.state.lock().unwrap();
            let session = state
                .sessions
                .get_mut(&tag_hex)
                .ok_or(ServiceError::NoOpenJourney)?;
            if session.state != JourneyState::Open {
                return Err(ServiceError::NoOpenJourney);
            }
            let age = now_ms().saturating_sub(session.entry_time);
            if age > self.journey_timeout.as_millis() as u64 {
                // Abandoned journey: escrowed value is forfeit.
                session.state = JourneyState::Closed;
                return Err(ServiceError::JourneyExpired);
            }
            session.state = JourneyState::Closing;
            session.exit_station = Some(exit_station.to_string());
            entry_station = session.entry_station.clone();
        }
        let fare = self
            .fare_table
            .fare(&entry_station, exit_station)
            .ok_or_else(|| ServiceError::UnknownStation(exit_station.to_string()))?;
        let rebate_amount = self.fare_table.max_fare() - fare;
        let rebate_interval = self.current_rebate_interval();

        let mut rng = self.rng.lock().unwrap();
        let mut nonce = vec![0u8; 32];
        rng.fill_bytes(&mut nonce);
        let (signer_session, rebate_challenge) = self.rebate_key.initial_challenge(&mut *rng);
        let mut settle_raw = [0u8; 16];
        rng.fill_bytes(&mut settle_raw);
        drop(rng);

        let exit_nonce = FareNonce {
            nonce: nonce.clone(),
            station_id: exit_station.to_string(),
            direction: Direction::Exit,
            issued_at: now_ms(),
        };
        let settle_id = hex::encode(settle_raw);
        let mut state = self.state.lock().unwrap();
        state
            .pending_nonces
            .insert(hex::encode(&nonce), exit_nonce.clone());
        state.settles.insert(
            settle_id.clone(),
            PendingSettle {
                session_tag: signature_y.digest().to_vec(),
                exit_nonce: exit_nonce.clone(),
                rebate_amount,
                rebate_interval,
                signer_session,
                rebate_challenge: rebate_challenge.clone(),
                consumed: false,
            },
        );
        Ok(FinishOutcome {
            exit_nonce,
            rebate_amount,
            rebate_interval,
            rebate_challenge,
            settle_id,
        })
    }

    /// Settle on AP(z): verify the exit signature, answer the rebate blind
    /// challenge, queue the annotated transcript for the rebate block, and
    /// close the journey.
    pub fn settle(
        &self,
        settle_id: &str,
        ap_id: &str,
        signature_z: &BlindSignature,
        rebate_e: &BigUint,
    ) -> Result<SettleOutcome, ServiceError> {
        let (exit_nonce, session_tag, rebate_amount, rebate_interval) = {
            let state = self.state.lock().unwrap();
            let pending = state
                .settles
                .get(settle_id)
                .ok_or(ServiceError::UnknownSettlement)?;
            if pending.consumed {
                return Err(ServiceError::SettlementReplayed);
            }
            (
                pending.exit_nonce.clone(),
                pending.session_tag.clone(),
                pending.rebate_amount,
                pending.rebate_interval,
            )
        };
        self.verify_ap_signature(ap_id, &exit_nonce.canonical_bytes(), signature_z)?;
        if !self.rebate_key.public().params.is_scalar(rebate_e) {
            return Err(ServiceError::Crypto(BlindSigError::ScalarOutOfRange));
        }

        let mut state = self.state.lock().unwrap();
        // Consume the exit nonce; single settlement per z.
        if state
            .pending_nonces
            .remove(&hex::encode(&exit_nonce.nonce))
            .is_none()
        {
            return Err(ServiceError::UnknownNonce);
        }
        let pending = state
            .settles
            .get_mut(settle_id)
            .ok_or(ServiceError::UnknownSettlement)?;
        if pending.consumed {
            return Err(ServiceError::SettlementReplayed);
        }
        pending.consumed = true;
        let proof = self
            .rebate_key
            .respond(&mut pending.signer_session, rebate_e)?;
        let record = ProofRecord {
            transcript: SignerTranscript {
                challenge: pending.rebate_challenge.clone(),
                e: rebate_e.clone(),
                proof: proof.clone(),
            },
            amount: Some(rebate_amount),
        };
        state
            .rebate_queues
            .entry(rebate_interval)
            .or_default()
            .push(record);
        if let Some(session) = state.sessions.get_mut(&hex::encode(&session_tag)) {
            session.state = JourneyState::Closed;
        }
        Ok(SettleOutcome {
            rebate_proof: proof,
            rebate_amount,
        })
    }

    /// Seal queued rebate transcripts into this interval's proof block.
    pub fn publish_rebate_block(&self, interval: u64) -> Result<BlockRef, ServiceError> {
        let proofs = {
            let mut state = self.state.lock().unwrap();
            match state.rebate_queues.get_mut(&interval) {
                Some(queue) if !queue.is_empty() => std::mem::take(queue),
                _ => return Err(ServiceError::NothingToPublish(interval)),
            }
        };
        let block = ProofBlock {
            cp_id: self.rebate_cp_id(),
            interval,
            cp_key_fingerprint: self.rebate_key.public().fingerprint().to_vec(),
            proofs,
            sealed_at: now_ms(),
        };
        Ok(self.ledger.append_proof_block(block)?)
    }

    /// Journey sessions as persisted; exercised by tests asserting that no
    /// credential or issuer material is stored.
    pub fn sessions_snapshot(&self) -> Vec<JourneySession> {
        self.state.lock().unwrap().sessions.values().cloned().collect()
    }
}

/// HTTP surface: POST /nonce, POST /enter, POST /finish, POST /settle,
/// plus GET /keys/{interval} distributing the rebate signing key.
pub mod http {
    use super::*;
    use crate::httpapi::{ApiError, ApiResult};
    use axum::extract::{Path, State};
    use axum::routing::{get, post};
    use axum::{Json, Router};

    #[derive(Debug, Serialize, Deserialize)]
    pub struct NonceRequest {
        pub direction: Direction,
        pub station_id: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct EnterRequest {
        #[serde(with = "crate::wire::hexbytes")]
        pub nonce: Vec<u8>,
        pub ap_id: String,
        pub signature: BlindSignature,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct EnterResponse {
        pub admitted: bool,
        #[serde(with = "crate::wire::hexbytes")]
        pub session_tag: Vec<u8>,
        pub entry_station: String,
        pub entry_time: TimestampMs,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct FinishRequest {
        pub station_id: String,
        pub signature: BlindSignature,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct FinishResponse {
        pub exit_nonce: FareNonce,
        pub rebate_amount: u64,
        pub rebate_interval: u64,
        pub rebate_challenge: Challenge,
        pub settle_id: String,
        #[serde(with = "crate::wire::hexbytes")]
        pub rebate_key_fingerprint: Vec<u8>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SettleRequest {
        pub settle_id: String,
        pub ap_id: String,
        pub signature_z: BlindSignature,
        #[serde(with = "crate::wire::hexnum")]
        pub rebate_e: BigUint,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SettleResponse {
        pub settled: bool,
        pub rebate_amount: u64,
        pub rebate_proof: Proof,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct KeyResponse {
        pub cp_id: String,
        pub interval: u64,
        #[serde(flatten)]
        pub key: SignerPublicKey,
        #[serde(with = "crate::wire::hexbytes")]
        pub fingerprint: Vec<u8>,
    }

    impl From<ServiceError> for ApiError {
        fn from(err: ServiceError) -> Self {
            match &err {
                ServiceError::UnknownNonce
                | ServiceError::NoOpenJourney
                | ServiceError::UnknownSettlement => ApiError::not_found("denied", err.to_string()),
                ServiceError::DirectionMismatch | ServiceError::UnknownStation(_) => {
                    ApiError::bad_request("bad-parameters", err.to_string())
                }
                ServiceError::UntrustedAp(_) | ServiceError::SignatureRejected => {
                    ApiError::forbidden("denied", err.to_string())
                }
                ServiceError::JourneyExpired => ApiError::conflict("journey-expired", err.to_string()),
                ServiceError::SettlementReplayed => {
                    ApiError::conflict("settlement-replayed", err.to_string())
                }
                ServiceError::NothingToPublish(_) => {
                    ApiError::bad_request("nothing-to-publish", err.to_string())
                }
                ServiceError::Crypto(_) => ApiError::bad_request("crypto", err.to_string()),
                ServiceError::Ledger(LedgerError::DuplicateBlock { .. }) => {
                    ApiError::conflict("duplicate-block", err.to_string())
                }
                ServiceError::Ledger(_) => ApiError::internal(err.to_string()),
            }
        }
    }

    pub fn router(service: Arc<FareService>) -> Router {
        Router::new()
            .route("/nonce", post(nonce))
            .route("/enter", post(enter))
            .route("/finish", post(finish))
            .route("/settle", post(settle))
            .route("/keys/{interval}", get(key))
            .with_state(service)
    }

    async fn nonce(
        State(service): State<Arc<FareService>>,
        Json(req): Json<NonceRequest>,
    ) -> ApiResult<FareNonce> {
        Ok(Json(service.issue_nonce(req.direction, &req.station_id)?))
    }

    async fn enter(
        State(service): State<Arc<FareService>>,
        Json(req): Json<EnterRequest>,
    ) -> ApiResult<EnterResponse> {
        let session = service.admit_entry(&hex::encode(&req.nonce), &req.ap_id, &req.signature)?;
        Ok(Json(EnterResponse {
            admitted: true,
            session_tag: session.entry_tag,
            entry_station: session.entry_station,
            entry_time: session.entry_time,
        }))
    }

    async fn finish(
        State(service): State<Arc<FareService>>,
        Json(req): Json<FinishRequest>,
    ) -> ApiResult<FinishResponse> {
        let outcome = service.finish(&req.station_id, &req.signature)?;
        Ok(Json(FinishResponse {
            exit_nonce: outcome.exit_nonce,
            rebate_amount: outcome.rebate_amount,
            rebate_interval: outcome.rebate_interval,
            rebate_challenge: outcome.rebate_challenge,
            settle_id: outcome.settle_id,
            rebate_key_fingerprint: service.rebate_public_key().fingerprint().to_vec(),
        }))
    }

    async fn settle(
        State(service): State<Arc<FareService>>,
        Json(req): Json<SettleRequest>,
    ) -> ApiResult<SettleResponse> {
        let outcome = service.settle(&req.settle_id, &req.ap_id, &req.signature_z, &req.rebate_e)?;
        Ok(Json(SettleResponse {
            settled: true,
            rebate_amount: outcome.rebate_amount,
            rebate_proof: outcome.rebate_proof,
        }))
    }

    async fn key(
        State(service): State<Arc<FareService>>,
        Path(interval): Path<String>,
    ) -> ApiResult<KeyResponse> {
        // One fixed rebate key; any interval resolves to it.
        let interval = if interval == "current" {
            service.current_rebate_interval()
        } else {
            interval.parse::<u64>().map_err(|_| {
                ApiError::bad_request("bad-parameters", "interval must be an integer")
            })?
        };
        Ok(Json(KeyResponse {
            cp_id: service.rebate_cp_id(),
            interval,
            key: service.rebate_public_key().clone(),
            fingerprint: service.rebate_public_key().fingerprint().to_vec(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::{generate_group, UserBlindingSession};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        service: FareService,
        ap_key: SignerKeyPair,
        rng: ChaCha20Rng,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = generate_group(64, &mut rng).unwrap();
        let ap_key = SignerKeyPair::generate(&params, &mut rng);
        let rebate_key = SignerKeyPair::generate(&params, &mut rng);
        let mut table_csv = String::from("entry,exit,fare\n");
        for a in ["A", "B"] {
            for b in ["A", "B"] {
                let fare = if a == "A" && b == "B" { 3 } else { 5 };
                table_csv.push_str(&format!("{a},{b},{fare}\n"));
            }
        }
        let table = FareTable::from_csv(table_csv.as_bytes(), 5).unwrap();
        let mut service = FareService::new(
            "svc-test",
            table,
            rebate_key,
            Arc::new(Ledger::new()),
            60,
            Duration::from_secs(4 * 3600),
            Some(seed),
        );
        service.trust_ap("ap-1", ap_key.public().clone());
        Fixture {
            service,
            ap_key,
            rng,
        }
    }

    /// Blind-sign `message` under the AP key, as the wallet would.
    fn ap_sign(fx: &mut Fixture, message: &[u8]) -> BlindSignature {
        let (mut session, challenge) = fx.ap_key.initial_challenge(&mut fx.rng);
        let (user, e) =
            UserBlindingSession::initiate(fx.ap_key.public(), message, &challenge, &mut fx.rng)
                .unwrap();
        let proof = fx.ap_key.respond(&mut session, &e).unwrap();
        user.unblind(fx.ap_key.public(), &proof).unwrap()
    }

    fn admit(fx: &mut Fixture, station: &str) -> (FareNonce, BlindSignature) {
        let nonce = fx.service.issue_nonce(Direction::Entry, station).unwrap();
        let sig = ap_sign(fx, &nonce.canonical_bytes());
        fx.service
            .admit_entry(&hex::encode(&nonce.nonce), "ap-1", &sig)
            .unwrap();
        (nonce, sig)
    }

    #[test]
    fn nonces_are_unique_pending_and_embed_their_issue_context() {
        let fx = fixture(301);
        let n1 = fx.service.issue_nonce(Direction::Entry, "A").unwrap();
        let n2 = fx.service.issue_nonce(Direction::Entry, "A").unwrap();
        assert_ne!(n1.nonce, n2.nonce);
        assert_eq!(n1.station_id, "A");
        assert_eq!(n1.direction, Direction::Entry);
        assert!(fx.service.nonce_is_pending(&hex::encode(&n1.nonce)));
    }

    #[test]
    fn admit_honest_flow_and_reject_replay_or_unknown() {
        let mut fx = fixture(302);
        let (nonce, sig) = admit(&mut fx, "A");
        // Nonce consumed: replaying the same AP(y) is denied.
        let err = fx
            .service
            .admit_entry(&hex::encode(&nonce.nonce), "ap-1", &sig)
            .unwrap_err();
        assert!(matches!(err, ServiceError::UnknownNonce));
        // A nonce the service never issued is denied.
        let err = fx
            .service
            .admit_entry(&hex::encode([9u8; 32]), "ap-1", &sig)
            .unwrap_err();
        assert!(matches!(err, ServiceError::UnknownNonce));
    }

    #[test]
    fn admit_rejects_untrusted_or_invalid_signatures() {
        let mut fx = fixture(303);
        let nonce = fx.service.issue_nonce(Direction::Entry, "A").unwrap();
        let sig = ap_sign(&mut fx, &nonce.canonical_bytes());
        let err = fx
            .service
            .admit_entry(&hex::encode(&nonce.nonce), "ap-rogue", &sig)
            .unwrap_err();
        assert!(matches!(err, ServiceError::UntrustedAp(_)));

        // Signature over different bytes fails verification.
        let bad_sig = ap_sign(&mut fx, b"not-the-nonce");
        let err = fx
            .service
            .admit_entry(&hex::encode(&nonce.nonce), "ap-1", &bad_sig)
            .unwrap_err();
        assert!(matches!(err, ServiceError::SignatureRejected));
    }

    #[test]
    fn finish_opens_exactly_once_and_computes_the_rebate() {
        let mut fx = fixture(304);
        let (_nonce, sig) = admit(&mut fx, "A");
        let outcome = fx.service.finish("B", &sig).unwrap();
        // fare(A,B)=3, max_fare=5.
        assert_eq!(outcome.rebate_amount, 2);
        assert_eq!(outcome.exit_nonce.direction, Direction::Exit);
        assert_eq!(outcome.exit_nonce.station_id, "B");
        // Second finish is denied: journey is CLOSING.
        assert!(matches!(
            fx.service.finish("B", &sig),
            Err(ServiceError::NoOpenJourney)
        ));
        // Unknown tag is denied.
        let stranger = ap_sign(&mut fx, b"unrelated");
        assert!(matches!(
            fx.service.finish("B", &stranger),
            Err(ServiceError::NoOpenJourney)
        ));
    }

    #[test]
    fn zero_rebate_at_max_fare_still_issues_a_credential() {
        let mut fx = fixture(305);
        let (_nonce, sig) = admit(&mut fx, "A");
        // fare(A,A)=5 = max_fare.
        let outcome = fx.service.finish("A", &sig).unwrap();
        assert_eq!(outcome.rebate_amount, 0);
        let (settle, rebate) = settle_flow(&mut fx, &outcome);
        assert_eq!(settle.rebate_amount, 0);
        assert!(fx.service.rebate_public_key().verify(b"rebate-msg", &rebate));
    }

    /// Complete the settle leg: sign z under the AP key, blind a rebate
    /// request, and exchange it for the rebate credential.
    fn settle_flow(fx: &mut Fixture, outcome: &FinishOutcome) -> (SettleOutcome, BlindSignature) {
        let sig_z = ap_sign(fx, &outcome.exit_nonce.canonical_bytes());
        let (user, e) = UserBlindingSession::initiate(
            fx.service.rebate_public_key(),
            b"rebate-msg",
            &outcome.rebate_challenge,
            &mut fx.rng,
        )
        .unwrap();
        let settle = fx
            .service
            .settle(&outcome.settle_id, "ap-1", &sig_z, &e)
            .unwrap();
        let rebate = user
            .unblind(fx.service.rebate_public_key(), &settle.rebate_proof)
            .unwrap();
        (settle, rebate)
    }

    #[test]
    fn settle_closes_the_journey_and_queues_the_annotated_rebate() {
        let mut fx = fixture(306);
        let (_nonce, sig) = admit(&mut fx, "A");
        let outcome = fx.service.finish("B", &sig).unwrap();
        let interval = outcome.rebate_interval;
        let (_settle, rebate) = settle_flow(&mut fx, &outcome);
        assert!(fx.service.rebate_public_key().verify(b"rebate-msg", &rebate));
        let sessions = fx.service.sessions_snapshot();
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].state, JourneyState::Closed);

        let ledger = Arc::clone(&fx.service.ledger);
        let block_ref = fx.service.publish_rebate_block(interval).unwrap();
        assert_eq!(block_ref.count, 1);
        let block = ledger.get_proof_block(&fx.service.rebate_cp_id(), interval).unwrap();
        assert_eq!(block.proofs[0].amount, Some(2));
        assert!(block.proofs[0]
            .transcript
            .verify_under(fx.service.rebate_public_key()));
    }

    #[test]
    fn settle_replay_is_denied() {
        let mut fx = fixture(307);
        let (_nonce, sig) = admit(&mut fx, "A");
        let outcome = fx.service.finish("B", &sig).unwrap();
        let sig_z = ap_sign(&mut fx, &outcome.exit_nonce.canonical_bytes());
        let (_user, e) = UserBlindingSession::initiate(
            fx.service.rebate_public_key(),
            b"rebate-msg",
            &outcome.rebate_challenge,
            &mut fx.rng,
        )
        .unwrap();
        fx.service
            .settle(&outcome.settle_id, "ap-1", &sig_z, &e)
            .unwrap();
        let err = fx
            .service
            .settle(&outcome.settle_id, "ap-1", &sig_z, &e)
            .unwrap_err();
        assert!(matches!(
            err,
            ServiceError::SettlementReplayed | ServiceError::UnknownNonce
        ));
    }

    #[test]
    fn expired_journey_forfeits() {
        let mut fx = fixture(308);
        fx.service.journey_timeout = Duration::from_millis(0);
        let (_nonce, sig) = admit(&mut fx, "A");
        std::thread::sleep(Duration::from_millis(5));
        assert!(matches!(
            fx.service.finish("B", &sig),
            Err(ServiceError::JourneyExpired)
        ));
        // Forfeited: a later finish cannot reopen it.
        assert!(matches!(
            fx.service.finish("B", &sig),
            Err(ServiceError::NoOpenJourney)
        ));
    }

    #[test]
    fn journey_sessions_store_no_issuer_material() {
        let mut fx = fixture(309);
        let (_nonce, sig) = admit(&mut fx, "A");
        let json = serde_json::to_string(&fx.service.sessions_snapshot()).unwrap();
        // The only identifier is the digest of AP(y); the signature
        // components themselves must not be persisted.
        for secret in [
            sig.zeta.to_str_radix(16),
            sig.rho.to_str_radix(16),
            sig.mu.to_str_radix(16),
        ] {
            assert!(
                !json.contains(&secret),
                "journey session leaked part of AP(y)"
            );
        }
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<&str> = parsed[0]
            .as_object()
            .unwrap()
            .keys()
            .map(|s| s.as_str())
            .collect();
        assert_eq!(
            keys,
            vec!["entry_station", "entry_tag", "entry_time", "exit_station", "state"]
        );
    }

    #[test]
    fn fare_table_rejects_incomplete_or_overpriced_tables() {
        let over = "entry,exit,fare\nA,A,9\n";
        assert!(matches!(
            FareTable::from_csv(over.as_bytes(), 5),
            Err(FareTableError::FareAboveMax { .. })
        ));
        let partial = "entry,exit,fare\nA,B,3\n";
        assert!(matches!(
            FareTable::from_csv(partial.as_bytes(), 5),
            Err(FareTableError::MissingPair { .. })
        ));
        let garbled = "entry,exit,fare\nA,B,three\n";
        assert!(matches!(
            FareTable::from_csv(garbled.as_bytes(), 5),
            Err(FareTableError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn concurrent_presentations_of_one_nonce_admit_exactly_one() {
        let mut fx = fixture(310);
        let nonce = fx.service.issue_nonce(Direction::Entry, "A").unwrap();
        let sig = ap_sign(&mut fx, &nonce.canonical_bytes());
        let service = Arc::new(fx.service);
        let mut handles = Vec::new();
        for _ in 0..8 {
            let service = Arc::clone(&service);
            let nonce_hex = hex::encode(&nonce.nonce);
            let sig = sig.clone();
            handles.push(std::thread::spawn(move || {
                service.admit_entry(&nonce_hex, "ap-1", &sig).is_ok()
            }));
        }
        let successes = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|ok| *ok)
            .count();
        assert_eq!(successes, 1);
    }
}
