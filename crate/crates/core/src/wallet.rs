//! The user client: acquires and stores credentials, verifies anonymity
//! sets, and drives the entry and exit state machines against configured
//! CP/AP/Service endpoints. State lives in a single append-only
//! newline-delimited JSON file with compaction.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{BlindSignature, OwnershipKeyPair, SignerTranscript};
use crate::client::{CallError, IssuedToken, ProtocolClient};
use crate::fareservice::FareNonce;
use crate::ledger::TokenId;
use crate::wire::{now_ms, TimestampMs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenLifecycle {
    Requested,
    Issued,
    Verified,
    Escrowed,
    Spent,
}

/// One stored credential. `wallet_id` is the digest of the token message
/// and never changes; the ledger-facing `token_id` exists once issued.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRecord {
    pub wallet_id: String,
    pub cp_id: String,
    pub interval: u64,
    pub value: u64,
    #[serde(with = "crate::wire::hexbytes")]
    pub message: Vec<u8>,
    pub ownership: OwnershipKeyPair,
    pub credential: Option<BlindSignature>,
    pub transcript: Option<SignerTranscript>,
    pub state: TokenLifecycle,
    pub updated_at: TimestampMs,
}

impl TokenRecord {
    pub fn token_id(&self) -> Option<TokenId> {
        self.credential.as_ref().map(TokenId::of)
    }
}

/// A held journey ticket: AP(y) plus everything needed to exit later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TicketRecord {
    pub ticket_id: String,
    pub signature_y: BlindSignature,
    pub nonce: FareNonce,
    pub ap_id: String,
    pub token_wallet_ids: Vec<String>,
    pub entry_time: TimestampMs,
    pub service_url: String,
    pub ap_url: String,
    pub live: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum WalletLine {
    #[serde(rename = "token")]
    Token(TokenRecord),
    #[serde(rename = "ticket")]
    Ticket(TicketRecord),
}

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("wallet io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt wallet record at line {0}")]
    Corrupt(usize),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("unknown ticket {0}")]
    UnknownTicket(String),
    #[error("token {id} is {state:?}, expected one of {expected:?}")]
    WrongState {
        id: String,
        state: TokenLifecycle,
        expected: Vec<TokenLifecycle>,
    },
    #[error("token count must be at least 1")]
    EmptyRequest,
    #[error("issuer fingerprint {got} is not in the trusted set")]
    UntrustedIssuer { got: String },
    #[error("anonymity-set discrepancy: {0}")]
    Discrepancy(String),
    #[error("double-spend rejected by the network: {0}")]
    DoubleSpend(String),
    #[error("ticket {0} is no longer live")]
    TicketSpent(String),
    #[error(transparent)]
    Call(#[from] CallError),
}

/// Endpoints and trust anchors, loaded from a TOML config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WalletConfig {
    pub cp_url: String,
    pub ap_url: String,
    pub service_url: String,
    #[serde(default = "default_user_ref")]
    pub user_ref: String,
    #[serde(default = "default_station_entry")]
    pub entry_station: String,
    #[serde(default = "default_station_exit")]
    pub exit_station: String,
    /// Hex fingerprints of issuer keys this wallet accepts; empty means
    /// trust-on-first-use.
    #[serde(default)]
    pub trusted_issuer_fingerprints: Vec<String>,
    #[serde(default)]
    pub trusted_ap_fingerprints: Vec<String>,
    #[serde(default = "default_true")]
    pub verify_after_entry: bool,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

fn default_user_ref() -> String {
    "user-1".to_string()
}
fn default_station_entry() -> String {
    "A".to_string()
}
fn default_station_exit() -> String {
    "B".to_string()
}
fn default_true() -> bool {
    true
}
fn default_timeout_secs() -> u64 {
    60
}

impl WalletConfig {
    pub fn load(path: &Path) -> Result<Self, WalletError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|_| WalletError::Corrupt(0))
    }
}

/// Compact when more than half the lines are superseded.
const COMPACTION_SLACK: usize = 2;

pub struct Wallet {
    path: PathBuf,
    tokens: HashMap<String, TokenRecord>,
    tickets: HashMap<String, TicketRecord>,
    lines_written: usize,
    config: WalletConfig,
    client: ProtocolClient,
}

impl Wallet {
    pub fn open(path: &Path, config: WalletConfig, seed: Option<u64>) -> Result<Self, WalletError> {
        let client = ProtocolClient::new(
            Duration::from_secs(config.request_timeout_secs),
            seed,
        );
        let mut wallet = Wallet {
            path: path.to_path_buf(),
            tokens: HashMap::new(),
            tickets: HashMap::new(),
            lines_written: 0,
            config,
            client,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: WalletLine =
                    serde_json::from_str(&line).map_err(|_| WalletError::Corrupt(idx + 1))?;
                wallet.lines_written += 1;
                match record {
                    WalletLine::Token(t) => {
                        wallet.tokens.insert(t.wallet_id.clone(), t);
                    }
                    WalletLine::Ticket(t) => {
                        wallet.tickets.insert(t.ticket_id.clone(), t);
                    }
                }
            }
        }
        if wallet.lines_written > COMPACTION_SLACK * (wallet.tokens.len() + wallet.tickets.len()) {
            wallet.compact()?;
        }
        Ok(wallet)
    }

    pub fn config(&self) -> &WalletConfig {
        &self.config
    }

    fn append(&mut self, line: &WalletLine) -> Result<(), WalletError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        serde_json::to_writer(&mut file, line).map_err(|_| WalletError::Corrupt(0))?;
        file.write_all(b"\n")?;
        self.lines_written += 1;
        Ok(())
    }

    fn put_token(&mut self, record: TokenRecord) -> Result<(), WalletError> {
        self.append(&WalletLine::Token(record.clone()))?;
        self.tokens.insert(record.wallet_id.clone(), record);
        Ok(())
    }

    fn put_ticket(&mut self, record: TicketRecord) -> Result<(), WalletError> {
        self.append(&WalletLine::Ticket(record.clone()))?;
        self.tickets.insert(record.ticket_id.clone(), record);
        Ok(())
    }

    /// Rewrite the log keeping only the latest record per id.
    pub fn compact(&mut self) -> Result<(), WalletError> {
        let tmp = self.path.with_extension("compacting");
        {
            let mut file = File::create(&tmp)?;
            for token in self.tokens.values() {
                serde_json::to_writer(&mut file, &WalletLine::Token(token.clone()))
                    .map_err(|_| WalletError::Corrupt(0))?;
                file.write_all(b"\n")?;
            }
            for ticket in self.tickets.values() {
                serde_json::to_writer(&mut file, &WalletLine::Ticket(ticket.clone()))
                    .map_err(|_| WalletError::Corrupt(0))?;
                file.write_all(b"\n")?;
            }
        }
        std::fs::rename(&tmp, &self.path)?;
        self.lines_written = self.tokens.len() + self.tickets.len();
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.tokens.values()
    }

    pub fn tickets(&self) -> impl Iterator<Item = &TicketRecord> {
        self.tickets.values()
    }

    pub fn token(&self, wallet_id: &str) -> Result<&TokenRecord, WalletError> {
        self.tokens
            .get(wallet_id)
            .ok_or_else(|| WalletError::UnknownToken(wallet_id.to_string()))
    }

    fn advance_state(
        &mut self,
        wallet_id: &str,
        next: TokenLifecycle,
    ) -> Result<(), WalletError> {
        let mut record = self.token(wallet_id)?.clone();
        // Lifecycle only moves forward.
        if next < record.state {
            return Err(WalletError::WrongState {
                id: wallet_id.to_string(),
                state: record.state,
                expected: vec![next],
            });
        }
        record.state = next;
        record.updated_at = now_ms();
        self.put_token(record)
    }

    fn check_trusted(
        trusted: &[String],
        fingerprint: &[u8],
    ) -> Result<(), WalletError> {
        if trusted.is_empty() {
            return Ok(());
        }
        let hex_fp = hex::encode(fingerprint);
        if trusted.iter().any(|t| t.eq_ignore_ascii_case(&hex_fp)) {
            Ok(())
        } else {
            Err(WalletError::UntrustedIssuer { got: hex_fp })
        }
    }

    fn store_issued(&mut self, token: &IssuedToken) -> Result<String, WalletError> {
        let wallet_id = hex::encode(sha2_digest(&token.message));
        self.put_token(TokenRecord {
            wallet_id: wallet_id.clone(),
            cp_id: token.cp_id.clone(),
            interval: token.interval,
            value: token.value,
            message: token.message.clone(),
            ownership: token.ownership.clone(),
            credential: Some(token.credential.clone()),
            transcript: Some(token.transcript.clone()),
            state: TokenLifecycle::Issued,
            updated_at: now_ms(),
        })?;
        Ok(wallet_id)
    }

    fn issued_view(&self, record: &TokenRecord) -> IssuedToken {
        IssuedToken {
            cp_id: record.cp_id.clone(),
            interval: record.interval,
            value: record.value,
            message: record.message.clone(),
            ownership: record.ownership.clone(),
            credential: record.credential.clone().expect("issued token"),
            transcript: record.transcript.clone().expect("issued token"),
        }
    }

    /// Buy `count` unit tokens from the CP. Nothing persists unless the
    /// whole batch unblinds and verifies.
    pub async fn acquire(
        &mut self,
        count: usize,
        interval: Option<u64>,
    ) -> Result<Vec<String>, WalletError> {
        if count == 0 {
            return Err(WalletError::EmptyRequest);
        }
        let cp_url = self.config.cp_url.clone();
        let user_ref = self.config.user_ref.clone();
        let (key_resp, _) = self.client.fetch_issuer_key(&cp_url, interval).await?;
        Self::check_trusted(
            &self.config.trusted_issuer_fingerprints,
            &key_resp.fingerprint,
        )?;
        let (tokens, _subs) = self
            .client
            .acquire_tokens(&cp_url, &user_ref, Some(key_resp.interval), count, 1)
            .await?;
        let mut ids = Vec::with_capacity(tokens.len());
        for token in &tokens {
            ids.push(self.store_issued(token)?);
        }
        Ok(ids)
    }

    /// Fetch the credential's interval block through the AP, confirm our own
    /// blinded proof is in it and that every entry verifies under the one
    /// interval key. Returns the anonymity-set size m.
    pub async fn verify_anonymity_set(&mut self, wallet_id: &str) -> Result<usize, WalletError> {
        let record = self.token(wallet_id)?.clone();
        if record.state < TokenLifecycle::Issued {
            return Err(WalletError::WrongState {
                id: wallet_id.to_string(),
                state: record.state,
                expected: vec![TokenLifecycle::Issued, TokenLifecycle::Verified],
            });
        }
        let (key_resp, _) = self
            .client
            .fetch_issuer_key(&self.config.cp_url, Some(record.interval))
            .await?;
        let m = match self
            .client
            .verify_block(
                &self.config.ap_url,
                &record.cp_id,
                record.interval,
                &key_resp.key,
                record.transcript.as_ref(),
            )
            .await
        {
            Ok((m, _)) => m,
            Err(CallError::Protocol(reason)) => return Err(WalletError::Discrepancy(reason)),
            Err(other) => return Err(other.into()),
        };
        if record.state == TokenLifecycle::Issued {
            self.advance_state(wallet_id, TokenLifecycle::Verified)?;
        }
        Ok(m)
    }

    /// The full entry flow over a token vector. Tokens move to ESCROWED and
    /// the ticket is stored only after the gate admits.
    pub async fn enter(&mut self, wallet_ids: &[String]) -> Result<String, WalletError> {
        if wallet_ids.is_empty() {
            return Err(WalletError::EmptyRequest);
        }
        let mut records = Vec::with_capacity(wallet_ids.len());
        for id in wallet_ids {
            let record = self.token(id)?;
            // Spendable states only; anything else fails before any
            // network call.
            match record.state {
                TokenLifecycle::Issued | TokenLifecycle::Verified => records.push(record.clone()),
                state => {
                    return Err(WalletError::WrongState {
                        id: id.clone(),
                        state,
                        expected: vec![TokenLifecycle::Issued, TokenLifecycle::Verified],
                    })
                }
            }
        }
        let issued: Vec<IssuedToken> = records.iter().map(|r| self.issued_view(r)).collect();
        let refs: Vec<&IssuedToken> = issued.iter().collect();

        let (ap_key_resp, _) = self.client.fetch_ap_key(&self.config.ap_url).await?;
        Self::check_trusted(&self.config.trusted_ap_fingerprints, &ap_key_resp.fingerprint)?;

        let (journey, _subs) = self
            .client
            .entry_flow(
                &self.config.service_url,
                &self.config.ap_url,
                &ap_key_resp.key,
                &self.config.entry_station,
                &refs,
            )
            .await
            .map_err(map_spend_error)?;

        for id in wallet_ids {
            self.advance_state(id, TokenLifecycle::Escrowed)?;
        }
        let ticket_id = journey.entry_ref.clone();
        self.put_ticket(TicketRecord {
            ticket_id: ticket_id.clone(),
            signature_y: journey.signature_y,
            nonce: journey.nonce,
            ap_id: journey.ap_id,
            token_wallet_ids: wallet_ids.to_vec(),
            entry_time: now_ms(),
            service_url: self.config.service_url.clone(),
            ap_url: self.config.ap_url.clone(),
            live: true,
        })?;

        if self.config.verify_after_entry {
            // Off the critical path by design; a missing block (not yet
            // published) is not an error here.
            for id in wallet_ids {
                let _ = self.verify_anonymity_set(id).await;
            }
        }
        Ok(ticket_id)
    }

    /// The full exit flow for a held ticket: finish, finalise, settle, and
    /// store the rebate credential as a fresh token.
    pub async fn exit(&mut self, ticket_id: &str) -> Result<ExitSummary, WalletError> {
        let ticket = self
            .tickets
            .get(ticket_id)
            .cloned()
            .ok_or_else(|| WalletError::UnknownTicket(ticket_id.to_string()))?;
        if !ticket.live {
            return Err(WalletError::TicketSpent(ticket_id.to_string()));
        }
        let records: Vec<TokenRecord> = ticket
            .token_wallet_ids
            .iter()
            .map(|id| self.token(id).cloned())
            .collect::<Result<_, _>>()?;
        let issued: Vec<IssuedToken> = records.iter().map(|r| self.issued_view(r)).collect();
        let refs: Vec<&IssuedToken> = issued.iter().collect();

        let (ap_key_resp, _) = self.client.fetch_ap_key(&ticket.ap_url).await?;
        Self::check_trusted(&self.config.trusted_ap_fingerprints, &ap_key_resp.fingerprint)?;

        let journey = crate::client::JourneyHandle {
            signature_y: ticket.signature_y.clone(),
            nonce: ticket.nonce.clone(),
            ap_id: ticket.ap_id.clone(),
            session_tag: Vec::new(),
            entry_ref: ticket.ticket_id.clone(),
        };
        let (exit_result, _subs) = self
            .client
            .exit_flow(
                &ticket.service_url,
                &ticket.ap_url,
                &ap_key_resp.key,
                &self.config.exit_station,
                &journey,
                &refs,
            )
            .await
            .map_err(map_spend_error)?;

        for id in &ticket.token_wallet_ids {
            self.advance_state(id, TokenLifecycle::Spent)?;
        }
        let rebate_wallet_id = self.store_issued(&exit_result.rebate)?;
        let mut closed = ticket;
        closed.live = false;
        self.put_ticket(closed)?;
        Ok(ExitSummary {
            rebate_wallet_id,
            rebate_amount: exit_result.rebate_amount,
        })
    }
}

#[derive(Debug)]
pub struct ExitSummary {
    pub rebate_wallet_id: String,
    pub rebate_amount: u64,
}

fn map_spend_error(err: CallError) -> WalletError {
    match &err {
        CallError::Status { error_code, message, .. }
            if error_code == "double-spend" || error_code == "token-state" =>
        {
            WalletError::DoubleSpend(message.clone())
        }
        _ => WalletError::Call(err),
    }
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}
