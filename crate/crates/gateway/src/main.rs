use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use llm_gateway::config::GatewayConfig;
use llm_gateway::eval::{evaluate, Mode};
use llm_gateway::gateway::Gateway;
use llm_gateway::invoker::BUILTIN_SCHEME;
use llm_gateway::server;
use llm_gateway_core::calc;
use llm_gateway_core::corpus::generate_corpus;
use llm_gateway_core::services::ServiceDescriptor;
use llm_gateway_core::users::WorkerClass;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "llm-gateway", version, about = "Gateway that routes chat prompts to registered services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway HTTP server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Register the in-process calculator at startup.
        #[arg(long)]
        builtin_calculator: bool,
        /// Write the admin key to this file.
        #[arg(long)]
        admin_key_out: Option<PathBuf>,
    },
    /// Register a service descriptor (JSON) with a running gateway.
    RegisterService {
        descriptor: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        /// File holding the admin key.
        #[arg(long)]
        admin_key: PathBuf,
    },
    /// Create a user on a running gateway and print its auth key.
    AddUser {
        user_id: String,
        /// Services the user may reach.
        #[arg(long, value_delimiter = ',')]
        services: Vec<String>,
        /// Worker classes the user may run on.
        #[arg(long, value_delimiter = ',', default_value = "cpu,gpu", value_parser = parse_class)]
        workers: Vec<WorkerClass>,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        admin_key: PathBuf,
    },
    /// Run the arithmetic accuracy harness against an in-process gateway.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,5,10,15,20")]
        arities: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        processes: usize,
        /// baseline, pipeline, or both.
        #[arg(long, value_delimiter = ',', default_value = "baseline,pipeline")]
        mode: Vec<Mode>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve the calculator as a standalone service.
    Calculator {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8090)]
        port: u16,
    },
}

fn parse_class(s: &str) -> Result<WorkerClass, String> {
    match s {
        "cpu" => Ok(WorkerClass::Cpu),
        "gpu" => Ok(WorkerClass::Gpu),
        other => Err(format!("unknown worker class {other:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<GatewayConfig, String> {
    let mut cfg = match path {
        Some(p) => GatewayConfig::load(p).map_err(|e| e.to_string())?,
        None => GatewayConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok()).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn read_key(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path)
        .map(|s| s.trim().to_string())
        .map_err(|e| format!("cannot read admin key {}: {e}", path.display()))
}

fn post_admin(server: &str, route: &str, key: &str, body: &Value) -> Result<Value, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}{route}", server.trim_end_matches('/'));
    let mut resp = agent
        .post(&url)
        .header("content-type", "application/json")
        .header("x-admin-key", key)
        .send(body.to_string())
        .map_err(|e| format!("{url}: {e}"))?;
    let status = resp.status();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    if !status.is_success() {
        return Err(format!("{url}: HTTP {status}: {text}"));
    }
    serde_json::from_str(&text).map_err(|e| format!("{url}: {e}"))
}

fn ensure_calculator(gw: &Gateway) -> Result<(), String> {
    if gw.services().iter().any(|s| s.name == "calculator") {
        return Ok(());
    }
    gw.register_service(calc::descriptor(&format!("{BUILTIN_SCHEME}calculator")))
        .map_err(|e| e.to_string())
}

fn runtime() -> Result<tokio::runtime::Runtime, String> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve {
            config,
            builtin_calculator,
            admin_key_out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let addr: SocketAddr = format!("{}:{}", cfg.server.bind, cfg.server.port)
                .parse()
                .map_err(|e| format!("bad bind address: {e}"))?;
            let generated = cfg.server.admin_key.is_none();
            let gw = Gateway::new(cfg).map_err(|e| e.to_string())?;
            if builtin_calculator {
                ensure_calculator(&gw)?;
            }
            if let Some(p) = admin_key_out {
                std::fs::write(&p, gw.admin_key()).map_err(|e| format!("{}: {e}", p.display()))?;
            } else if generated {
                println!("admin key: {}", gw.admin_key());
            }
            runtime()?
                .block_on(server::serve(server::app(Arc::new(gw)), addr))
                .map_err(|e| e.to_string())
        }
        Command::RegisterService {
            descriptor,
            server,
            admin_key,
        } => {
            let text = std::fs::read_to_string(&descriptor).map_err(|e| format!("{}: {e}", descriptor.display()))?;
            let desc: ServiceDescriptor =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", descriptor.display()))?;
            desc.validate().map_err(|e| e.to_string())?;
            post_admin(&server, "/v1/services", &read_key(&admin_key)?, &serde_json::to_value(&desc).unwrap())?;
            println!("registered {}", desc.name);
            Ok(())
        }
        Command::AddUser {
            user_id,
            services,
            workers,
            server,
            admin_key,
        } => {
            let body = json!({
                "user_id": user_id,
                "certificate": {"allowed_services": services, "allowed_worker_classes": workers},
            });
            let rec = post_admin(&server, "/v1/users", &read_key(&admin_key)?, &body)?;
            println!("{}", rec["auth_key"].as_str().unwrap_or_default());
            Ok(())
        }
        Command::Eval {
            config,
            arities,
            n,
            seed,
            processes,
            mode,
            csv,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.server.state_file = None;
            let gw = Gateway::new(cfg).map_err(|e| e.to_string())?;
            ensure_calculator(&gw)?;
            let corpus = generate_corpus(&arities, n, seed);
            let report = evaluate(&gw, &corpus, &mode, processes).map_err(|e| e.to_string())?;
            print!("{}", report.render_table());
            if let Some(p) = csv {
                let body = report.to_csv().map_err(|e| e.to_string())?;
                std::fs::write(&p, body).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            Ok(())
        }
        Command::Calculator { bind, port } => {
            let addr: SocketAddr = format!("{bind}:{port}").parse().map_err(|e| format!("bad bind address: {e}"))?;
            runtime()?
                .block_on(server::serve(server::calculator_app(), addr))
                .map_err(|e| e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
