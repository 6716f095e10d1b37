//! Client-side protocol flows shared by the wallet and the load harness:
//! credential acquisition, the entry flow (Figure-2a shape), the exit flow,
//! and anonymity-set verification. Every step reports the response size of
//! each sub-request so callers can account for data usage.

use std::sync::Mutex;
use std::time::Duration;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::blindsig::{
    ownership_keygen, BlindSignature, OwnershipKeyPair, OwnershipProof, SignerPublicKey,
    SignerTranscript, UserBlindingSession,
};
use crate::fareservice::http as svc_http;
use crate::fareservice::{Direction, FareNonce};
use crate::gateway::http as gw_http;
use crate::gateway::{ChallengePurpose, TokenPresentation};
use crate::issuer::http as cp_http;
use crate::ledger::ProofBlock;
use crate::token::TokenMessage;
use crate::wire::ErrorBody;

/// Response-size record for one sub-request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubResponse {
    pub name: &'static str,
    pub bytes: usize,
}

#[derive(Debug, Error)]
pub enum CallError {
    #[error("request timed out")]
    Timeout,
    #[error("http {code} ({error_code}): {message}")]
    Status {
        code: u16,
        error_code: String,
        message: String,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
}

impl CallError {
    fn from_reqwest(err: reqwest::Error) -> Self {
        if err.is_timeout() {
            CallError::Timeout
        } else {
            CallError::Transport(err.to_string())
        }
    }

    /// True when the server rejected the request (as opposed to it not
    /// arriving or timing out).
    pub fn is_rejection(&self) -> bool {
        matches!(self, CallError::Status { .. })
    }

    pub fn status_code(&self) -> Option<u16> {
        match self {
            CallError::Status { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// A credential as held client-side: message, ownership key, signature,
/// and the signer transcript for later anonymity-set verification.
#[derive(Debug, Clone)]
pub struct IssuedToken {
    pub cp_id: String,
    pub interval: u64,
    pub value: u64,
    pub message: Vec<u8>,
    pub ownership: OwnershipKeyPair,
    pub credential: BlindSignature,
    pub transcript: SignerTranscript,
}

impl IssuedToken {
    pub fn token_id(&self) -> crate::ledger::TokenId {
        crate::ledger::TokenId::of(&self.credential)
    }
}

/// Result of a completed entry flow: what the user holds afterwards.
#[derive(Debug, Clone)]
pub struct JourneyHandle {
    pub signature_y: BlindSignature,
    pub nonce: FareNonce,
    pub ap_id: String,
    pub session_tag: Vec<u8>,
    pub entry_ref: String,
}

/// Result of a completed exit flow.
#[derive(Debug)]
pub struct ExitResult {
    pub rebate: IssuedToken,
    pub rebate_amount: u64,
    pub exit_ref: String,
}

pub struct ProtocolClient {
    http: reqwest::Client,
    rng: Mutex<ChaCha20Rng>,
}

impl ProtocolClient {
    pub fn new(timeout: Duration, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        ProtocolClient {
            http: reqwest::Client::builder()
                .timeout(timeout)
                .pool_max_idle_per_host(512)
                .build()
                .expect("reqwest client"),
            rng: Mutex::new(rng),
        }
    }

    async fn read_response<Resp: DeserializeOwned>(
        resp: reqwest::Response,
        name: &'static str,
    ) -> Result<(Resp, SubResponse), CallError> {
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(CallError::from_reqwest)?;
        if !status.is_success() {
            let parsed: Option<ErrorBody> = serde_json::from_slice(&bytes).ok();
            let (error_code, message) = parsed
                .map(|b| (b.error, b.message))
                .unwrap_or_else(|| ("unknown".into(), String::from_utf8_lossy(&bytes).into()));
            return Err(CallError::Status {
                code: status.as_u16(),
                error_code,
                message,
            });
        }
        let body: Resp = serde_json::from_slice(&bytes)
            .map_err(|e| CallError::Protocol(format!("{name}: bad response body: {e}")))?;
        Ok((
            body,
            SubResponse {
                name,
                bytes: bytes.len(),
            },
        ))
    }

    pub async fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
        name: &'static str,
    ) -> Result<(Resp, SubResponse), CallError> {
        let resp = self
            .http
            .post(url)
            .json(body)
            .send()
            .await
            .map_err(CallError::from_reqwest)?;
        Self::read_response(resp, name).await
    }

    pub async fn get_json<Resp: DeserializeOwned>(
        &self,
        url: &str,
        name: &'static str,
    ) -> Result<(Resp, SubResponse), CallError> {
        let resp = self
            .http
            .get(url)
            .send()
            .await
            .map_err(CallError::from_reqwest)?;
        Self::read_response(resp, name).await
    }

    /// Key distribution from an issuer-shaped endpoint (CP or the service's
    /// rebate identity). `interval` None means "current".
    pub async fn fetch_issuer_key(
        &self,
        base_url: &str,
        interval: Option<u64>,
    ) -> Result<(cp_http::KeyResponse, SubResponse), CallError> {
        let path = match interval {
            Some(i) => format!("{base_url}/keys/{i}"),
            None => format!("{base_url}/keys/current"),
        };
        self.get_json(&path, "fetch-key").await
    }

    pub async fn fetch_ap_key(
        &self,
        ap_url: &str,
    ) -> Result<(gw_http::KeyResponse, SubResponse), CallError> {
        self.get_json(&format!("{ap_url}/key"), "fetch-ap-key").await
    }

    /// The three-move acquisition of `count` unit-value credentials,
    /// fetching the interval key first.
    pub async fn acquire_tokens(
        &self,
        cp_url: &str,
        user_ref: &str,
        interval: Option<u64>,
        count: usize,
        value: u64,
    ) -> Result<(Vec<IssuedToken>, Vec<SubResponse>), CallError> {
        let (key_resp, sub) = self.fetch_issuer_key(cp_url, interval).await?;
        let (tokens, mut subs) = self
            .acquire_tokens_with_key(cp_url, user_ref, &key_resp, count, value)
            .await?;
        subs.insert(0, sub);
        Ok((tokens, subs))
    }

    /// Acquisition against an already-distributed interval key: the two
    /// signing moves only.
    pub async fn acquire_tokens_with_key(
        &self,
        cp_url: &str,
        user_ref: &str,
        key_resp: &cp_http::KeyResponse,
        count: usize,
        value: u64,
    ) -> Result<(Vec<IssuedToken>, Vec<SubResponse>), CallError> {
        if count == 0 {
            return Err(CallError::Protocol(
                "token count must be at least 1".to_string(),
            ));
        }
        let mut subs = Vec::new();
        let cp_key = key_resp.key.clone();
        let interval = key_resp.interval;
        let cp_id = key_resp.cp_id.clone();

        // Token materials: ownership key pair and message per token.
        let mut materials = Vec::with_capacity(count);
        {
            let mut rng = self.rng.lock().unwrap();
            for _ in 0..count {
                let ownership = ownership_keygen(&cp_key.params, &mut *rng);
                let message = TokenMessage {
                    owner_public: ownership.public.clone(),
                    value,
                    interval,
                }
                .encode();
                materials.push((ownership, message));
            }
        }
        let tags: Vec<String> = (0..count).map(|i| format!("req-{i}")).collect();
        let begin_req = cp_http::BeginRequest {
            user_ref: user_ref.to_string(),
            interval,
            blinded_requests: tags,
        };
        let (begin, sub): (cp_http::BeginResponse, _) = self
            .post_json(&format!("{cp_url}/issue/begin"), &begin_req, "issue-begin")
            .await?;
        subs.push(sub);
        if begin.challenges.len() != count {
            return Err(CallError::Protocol(format!(
                "issuer returned {} challenges for {count} requests",
                begin.challenges.len()
            )));
        }

        let mut users = Vec::with_capacity(count);
        let mut e_values = Vec::with_capacity(count);
        {
            let mut rng = self.rng.lock().unwrap();
            for (challenge, (_own, message)) in begin.challenges.iter().zip(&materials) {
                let (user, e) = UserBlindingSession::initiate(
                    &cp_key,
                    message,
                    &challenge.challenge,
                    &mut *rng,
                )
                .map_err(|e| CallError::Protocol(e.to_string()))?;
                users.push(user);
                e_values.push(e);
            }
        }
        let complete_req = cp_http::CompleteRequest {
            session_id: begin.session_id.clone(),
            e_values: e_values.iter().cloned().map(cp_http::HexScalar).collect(),
        };
        let (complete, sub): (cp_http::CompleteResponse, _) = self
            .post_json(
                &format!("{cp_url}/issue/complete"),
                &complete_req,
                "issue-complete",
            )
            .await?;
        subs.push(sub);
        if complete.proofs.len() != count {
            return Err(CallError::Protocol(format!(
                "issuer returned {} proofs for {count} requests",
                complete.proofs.len()
            )));
        }

        // Unblind all-or-nothing: one tampered proof drops the whole batch.
        let mut tokens = Vec::with_capacity(count);
        for ((user, issued), ((ownership, message), (challenge, e))) in users
            .into_iter()
            .zip(&complete.proofs)
            .zip(
                materials
                    .into_iter()
                    .zip(begin.challenges.iter().map(|c| &c.challenge).zip(e_values)),
            )
        {
            let credential = user
                .unblind(&cp_key, &issued.proof)
                .map_err(|e| CallError::Protocol(format!("invalid proof from issuer: {e}")))?;
            tokens.push(IssuedToken {
                cp_id: cp_id.clone(),
                interval,
                value,
                message,
                ownership,
                credential,
                transcript: SignerTranscript {
                    challenge: challenge.clone(),
                    e,
                    proof: issued.proof.clone(),
                },
            });
        }
        Ok((tokens, subs))
    }

    fn ownership_proofs(
        &self,
        params: &crate::blindsig::GroupParams,
        tokens: &[&IssuedToken],
        challenge: &[u8],
    ) -> Vec<OwnershipProof> {
        let mut rng = self.rng.lock().unwrap();
        tokens
            .iter()
            .map(|t| t.ownership.prove(params, challenge, &mut *rng))
            .collect()
    }

    fn presentations(
        tokens: &[&IssuedToken],
        proofs: Vec<OwnershipProof>,
    ) -> Vec<TokenPresentation> {
        tokens
            .iter()
            .zip(proofs)
            .map(|(t, ownership_proof)| TokenPresentation {
                cp_id: t.cp_id.clone(),
                interval: t.interval,
                message: t.message.clone(),
                credential: t.credential.clone(),
                ownership_proof,
            })
            .collect()
    }

    /// Request a gate nonce.
    pub async fn request_nonce(
        &self,
        service_url: &str,
        direction: Direction,
        station_id: &str,
    ) -> Result<(FareNonce, SubResponse), CallError> {
        let req = svc_http::NonceRequest {
            direction,
            station_id: station_id.to_string(),
        };
        self.post_json(&format!("{service_url}/nonce"), &req, "request-nonce")
            .await
    }

    /// Open the AP's blind-sign + ownership challenge.
    pub async fn open_ap_challenge(
        &self,
        ap_url: &str,
        purpose: ChallengePurpose,
    ) -> Result<(gw_http::ChallengeResponse, SubResponse), CallError> {
        let req = gw_http::ChallengeRequest { purpose };
        self.post_json(&format!("{ap_url}/entry/challenge"), &req, "entry-challenge")
            .await
    }

    /// Prove-owner + escrow + request-signature against the AP, then
    /// unblind AP([y]).
    pub async fn ap_entry(
        &self,
        ap_url: &str,
        ap_key: &SignerPublicKey,
        challenge: &gw_http::ChallengeResponse,
        tokens: &[&IssuedToken],
        blind_message: &[u8],
    ) -> Result<(BlindSignature, gw_http::EntryResponse, SubResponse), CallError> {
        let proofs = self.ownership_proofs(&ap_key.params, tokens, &challenge.ownership_challenge);
        let (user, e) = {
            let mut rng = self.rng.lock().unwrap();
            UserBlindingSession::initiate(ap_key, blind_message, &challenge.blind, &mut *rng)
                .map_err(|e| CallError::Protocol(e.to_string()))?
        };
        let req = gw_http::EntryRequest {
            challenge_id: challenge.challenge_id.clone(),
            tokens: Self::presentations(tokens, proofs),
            e,
        };
        let (resp, sub): (gw_http::EntryResponse, _) = self
            .post_json(&format!("{ap_url}/entry"), &req, "entry")
            .await?;
        let signature = user
            .unblind(ap_key, &resp.proof)
            .map_err(|e| CallError::Protocol(format!("invalid AP proof: {e}")))?;
        Ok((signature, resp, sub))
    }

    /// Same exchange against the exit endpoint, finalising the vector.
    pub async fn ap_exit(
        &self,
        ap_url: &str,
        ap_key: &SignerPublicKey,
        challenge: &gw_http::ChallengeResponse,
        tokens: &[&IssuedToken],
        blind_message: &[u8],
    ) -> Result<(BlindSignature, gw_http::ExitResponse, SubResponse), CallError> {
        let proofs = self.ownership_proofs(&ap_key.params, tokens, &challenge.ownership_challenge);
        let (user, e) = {
            let mut rng = self.rng.lock().unwrap();
            UserBlindingSession::initiate(ap_key, blind_message, &challenge.blind, &mut *rng)
                .map_err(|e| CallError::Protocol(e.to_string()))?
        };
        let req = gw_http::EntryRequest {
            challenge_id: challenge.challenge_id.clone(),
            tokens: Self::presentations(tokens, proofs),
            e,
        };
        let (resp, sub): (gw_http::ExitResponse, _) = self
            .post_json(&format!("{ap_url}/exit"), &req, "exit")
            .await?;
        let signature = user
            .unblind(ap_key, &resp.proof)
            .map_err(|e| CallError::Protocol(format!("invalid AP proof: {e}")))?;
        Ok((signature, resp, sub))
    }

    /// Present AP(y) at the gate.
    pub async fn present_entry(
        &self,
        service_url: &str,
        nonce: &FareNonce,
        ap_id: &str,
        signature: &BlindSignature,
    ) -> Result<(svc_http::EnterResponse, SubResponse), CallError> {
        let req = svc_http::EnterRequest {
            nonce: nonce.nonce.clone(),
            ap_id: ap_id.to_string(),
            signature: signature.clone(),
        };
        self.post_json(&format!("{service_url}/enter"), &req, "verify-signature")
            .await
    }

    /// The full entry flow: request y, open the AP challenge, prove/escrow/
    /// sign, unblind, and present AP(y) at the gate.
    pub async fn entry_flow(
        &self,
        service_url: &str,
        ap_url: &str,
        ap_key: &SignerPublicKey,
        station_id: &str,
        tokens: &[&IssuedToken],
    ) -> Result<(JourneyHandle, Vec<SubResponse>), CallError> {
        let mut subs = Vec::new();
        let (nonce, sub) = self
            .request_nonce(service_url, Direction::Entry, station_id)
            .await?;
        subs.push(sub);
        let (challenge, sub) = self.open_ap_challenge(ap_url, ChallengePurpose::Entry).await?;
        subs.push(sub);
        let (signature_y, entry_resp, sub) = self
            .ap_entry(ap_url, ap_key, &challenge, tokens, &nonce.canonical_bytes())
            .await?;
        subs.push(sub);
        let (enter, sub) = self
            .present_entry(service_url, &nonce, &challenge.ap_id, &signature_y)
            .await?;
        subs.push(sub);
        Ok((
            JourneyHandle {
                signature_y,
                nonce,
                ap_id: challenge.ap_id,
                session_tag: enter.session_tag,
                entry_ref: entry_resp.entry_ref,
            },
            subs,
        ))
    }

    /// The full exit flow: finish with AP(y), finalise the vector over [z],
    /// and settle AP(z) plus the blinded rebate request [r].
    pub async fn exit_flow(
        &self,
        service_url: &str,
        ap_url: &str,
        ap_key: &SignerPublicKey,
        exit_station: &str,
        journey: &JourneyHandle,
        tokens: &[&IssuedToken],
    ) -> Result<(ExitResult, Vec<SubResponse>), CallError> {
        let mut subs = Vec::new();
        let finish_req = svc_http::FinishRequest {
            station_id: exit_station.to_string(),
            signature: journey.signature_y.clone(),
        };
        let (finish, sub): (svc_http::FinishResponse, _) = self
            .post_json(&format!("{service_url}/finish"), &finish_req, "finish")
            .await?;
        subs.push(sub);

        // Rebate key distribution (cached upstream in practice; the rebate
        // identity serves the same key for every interval).
        let (rebate_key_resp, sub) = self
            .fetch_issuer_key(service_url, Some(finish.rebate_interval))
            .await?;
        subs.push(sub);
        let rebate_key = rebate_key_resp.key;
        if rebate_key.fingerprint().to_vec() != finish.rebate_key_fingerprint {
            return Err(CallError::Protocol(
                "rebate key fingerprint mismatch".to_string(),
            ));
        }

        let (challenge, sub) = self.open_ap_challenge(ap_url, ChallengePurpose::Exit).await?;
        subs.push(sub);
        let (signature_z, exit_resp, sub) = self
            .ap_exit(
                ap_url,
                ap_key,
                &challenge,
                tokens,
                &finish.exit_nonce.canonical_bytes(),
            )
            .await?;
        subs.push(sub);

        // Fresh rebate token material bound to the granted amount.
        let (rebate_ownership, rebate_message, rebate_user, rebate_e) = {
            let mut rng = self.rng.lock().unwrap();
            let ownership = ownership_keygen(&rebate_key.params, &mut *rng);
            let message = TokenMessage {
                owner_public: ownership.public.clone(),
                value: finish.rebate_amount,
                interval: finish.rebate_interval,
            }
            .encode();
            let (user, e) = UserBlindingSession::initiate(
                &rebate_key,
                &message,
                &finish.rebate_challenge,
                &mut *rng,
            )
            .map_err(|e| CallError::Protocol(e.to_string()))?;
            (ownership, message, user, e)
        };
        let settle_req = svc_http::SettleRequest {
            settle_id: finish.settle_id.clone(),
            ap_id: challenge.ap_id.clone(),
            signature_z,
            rebate_e: rebate_e.clone(),
        };
        let (settle, sub): (svc_http::SettleResponse, _) = self
            .post_json(&format!("{service_url}/settle"), &settle_req, "settle")
            .await?;
        subs.push(sub);
        let rebate_credential = rebate_user
            .unblind(&rebate_key, &settle.rebate_proof)
            .map_err(|e| CallError::Protocol(format!("invalid rebate proof: {e}")))?;
        Ok((
            ExitResult {
                rebate: IssuedToken {
                    cp_id: rebate_key_resp.cp_id,
                    interval: finish.rebate_interval,
                    value: settle.rebate_amount,
                    message: rebate_message,
                    ownership: rebate_ownership,
                    credential: rebate_credential,
                    transcript: SignerTranscript {
                        challenge: finish.rebate_challenge.clone(),
                        e: rebate_e,
                        proof: settle.rebate_proof.clone(),
                    },
                },
                rebate_amount: settle.rebate_amount,
                exit_ref: exit_resp.exit_ref,
            },
            subs,
        ))
    }

    /// The verify phase: fetch the interval block through an AP, confirm the
    /// caller's own blinded proof appears, and check every record against
    /// the single interval key. Returns the anonymity-set size m.
    pub async fn verify_block(
        &self,
        ap_url: &str,
        cp_id: &str,
        interval: u64,
        issuer_key: &SignerPublicKey,
        own_transcript: Option<&SignerTranscript>,
    ) -> Result<(usize, Vec<SubResponse>), CallError> {
        let (block, sub): (ProofBlock, _) = self
            .get_json(
                &format!("{ap_url}/blocks/{cp_id}/{interval}"),
                "verify-block",
            )
            .await?;
        let subs = vec![sub];
        if block.cp_key_fingerprint != issuer_key.fingerprint().to_vec() {
            return Err(CallError::Protocol(
                "block key fingerprint does not match the interval key".to_string(),
            ));
        }
        if let Some(own) = own_transcript {
            let own_digest = own.digest();
            if !block
                .proofs
                .iter()
                .any(|record| record.transcript.digest() == own_digest)
            {
                return Err(CallError::Protocol(
                    "own blinded proof missing from the published block".to_string(),
                ));
            }
        }
        for (idx, record) in block.proofs.iter().enumerate() {
            if !record.transcript.verify_under(issuer_key) {
                return Err(CallError::Protocol(format!(
                    "block entry {idx} does not verify under the interval key"
                )));
            }
        }
        Ok((block.proofs.len(), subs))
    }

    /// Draw from the client's seeded randomness.
    pub fn random_bytes(&self, n: usize) -> Vec<u8> {
        let mut rng = self.rng.lock().unwrap();
        let mut out = vec![0u8; n];
        rng.fill_bytes(&mut out);
        out
    }

    pub fn random_scalar_below(&self, q: &BigUint) -> BigUint {
        use num_bigint::RandBigInt;
        self.rng.lock().unwrap().gen_biguint_below(q)
    }
}
