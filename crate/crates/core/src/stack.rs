//! Spawns a complete local deployment in-process: one shared simulated
//! ledger, one CP, one or more APs, and one fare service, each behind its
//! own HTTP listener on an ephemeral port.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tokio::task::JoinHandle;

use crate::blindsig::{generate_group, GroupParams, SignerKeyPair};
use crate::fareservice::{FareService, FareTable};
use crate::gateway::{CapacityLimit, CpDirectory, Gateway, GatewayConfig};
use crate::issuer::Issuer;
use crate::ledger::Ledger;

#[derive(Debug, Clone)]
pub struct StackConfig {
    /// Security parameter for the shared group.
    pub group_bits: u32,
    pub interval_secs: u64,
    pub ap_count: usize,
    pub stations: Vec<String>,
    pub flat_fare: u64,
    pub max_fare: u64,
    pub journey_timeout: Duration,
    pub gateway: GatewayConfig,
    /// Applied to the first AP only, for saturation experiments.
    pub entry_capacity: Option<CapacityLimit>,
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            group_bits: 256,
            interval_secs: 60,
            ap_count: 1,
            stations: vec!["A".to_string(), "B".to_string()],
            flat_fare: 3,
            max_fare: 5,
            journey_timeout: Duration::from_secs(4 * 3600),
            gateway: GatewayConfig::default(),
            entry_capacity: None,
            seed: 42,
        }
    }
}

pub struct LocalStack {
    pub cp_url: String,
    pub ap_urls: Vec<String>,
    pub service_url: String,
    pub ledger: Arc<Ledger>,
    pub issuer: Arc<Issuer>,
    pub gateways: Vec<Arc<Gateway>>,
    pub service: Arc<FareService>,
    pub interval: u64,
    pub params: GroupParams,
    handles: Vec<JoinHandle<()>>,
}

async fn serve(router: axum::Router) -> (String, JoinHandle<()>) {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .expect("bind ephemeral port");
    let addr = listener.local_addr().expect("local addr");
    let handle = tokio::spawn(async move {
        axum::serve(listener, router).await.expect("server run");
    });
    (format!("http://{addr}"), handle)
}

impl LocalStack {
    pub async fn spawn(config: StackConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let params = generate_group(config.group_bits, &mut rng).expect("valid group size");
        let ledger = Arc::new(Ledger::new());
        let mut handles = Vec::new();

        // CP with a key for the current interval.
        let issuer = Arc::new(Issuer::new(
            "cp-1",
            params.clone(),
            Arc::clone(&ledger),
            config.interval_secs,
            Some(config.seed ^ 0x6370),
        ));
        let interval = issuer.current_interval();
        issuer.ensure_interval_key(interval).expect("fresh interval");
        let (cp_url, handle) = serve(crate::issuer::http::router(Arc::clone(&issuer))).await;
        handles.push(handle);

        // Fare service: rebate signing key over the same group.
        let stations: Vec<&str> = config.stations.iter().map(|s| s.as_str()).collect();
        let fare_table = FareTable::flat(&stations, config.flat_fare, config.max_fare);
        let rebate_key =
            SignerKeyPair::generate(&params, &mut ChaCha20Rng::seed_from_u64(config.seed ^ 0x7262));
        let mut service = FareService::new(
            "svc-1",
            fare_table,
            rebate_key,
            Arc::clone(&ledger),
            config.interval_secs,
            config.journey_timeout,
            Some(config.seed ^ 0x7376),
        );

        // AP keys exist before the service so it can trust them; gateways
        // are built afterwards so their issuer directory covers both the CP
        // and the service's rebate identity.
        let ap_keys: Vec<SignerKeyPair> = (0..config.ap_count)
            .map(|n| {
                SignerKeyPair::generate(
                    &params,
                    &mut ChaCha20Rng::seed_from_u64(config.seed ^ (0xa0 + n as u64)),
                )
            })
            .collect();
        for (n, key) in ap_keys.iter().enumerate() {
            service.trust_ap(format!("ap-{}", n + 1), key.public().clone());
        }
        let service = Arc::new(service);
        let (service_url, handle) =
            serve(crate::fareservice::http::router(Arc::clone(&service))).await;
        handles.push(handle);

        let mut registry = HashMap::new();
        registry.insert("cp-1".to_string(), cp_url.clone());
        registry.insert(service.rebate_cp_id(), service_url.clone());

        let mut gateways = Vec::new();
        let mut ap_urls = Vec::new();
        for (n, ap_key) in ap_keys.into_iter().enumerate() {
            let mut gw_config = config.gateway.clone();
            if n == 0 {
                gw_config.capacity = config.entry_capacity.clone();
            }
            let gateway = Arc::new(Gateway::new(
                format!("ap-{}", n + 1),
                ap_key,
                Arc::clone(&ledger),
                CpDirectory::http(registry.clone()),
                gw_config,
                Some(config.seed ^ (0xb0 + n as u64)),
            ));
            let (ap_url, handle) =
                serve(crate::gateway::http::router(Arc::clone(&gateway))).await;
            ap_urls.push(ap_url);
            handles.push(handle);
            gateways.push(gateway);
        }

        LocalStack {
            cp_url,
            ap_urls,
            service_url,
            ledger,
            issuer,
            gateways,
            service,
            interval,
            params,
            handles,
        }
    }

    /// First AP's base URL.
    pub fn ap_url(&self) -> &str {
        &self.ap_urls[0]
    }

    pub fn shutdown(self) {
        for handle in &self.handles {
            handle.abort();
        }
    }
}
