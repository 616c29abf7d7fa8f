//! One cached request against a chat-completions endpoint.
//!
//! ABSTAIN_BASE_URL=https://api.example.com/v1 ABSTAIN_MODEL=some-model ABSTAIN_API_KEY=... \
//!     cargo run --example live_client

use abstain::dataset::QuestionRecord;
use abstain::modelgw::{cached_complete, HttpTransport, ModelEndpointConfig, ResponseCache};
use abstain::protocol::{evaluated_answer, parse_response, render_prompt, RewardConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (Ok(url), Ok(model)) = (
        std::env::var("ABSTAIN_BASE_URL"),
        std::env::var("ABSTAIN_MODEL"),
    ) else {
        eprintln!("set ABSTAIN_BASE_URL, ABSTAIN_MODEL and ABSTAIN_API_KEY to run this example");
        return Ok(());
    };
    let mut cfg = ModelEndpointConfig::new(url, model);
    cfg.auth_token_env = Some("ABSTAIN_API_KEY".into());
    cfg.request_logprobs = true;
    cfg.validate()?;

    let transport = HttpTransport::new(cfg.clone())?;
    let cache = ResponseCache::open(std::env::temp_dir().join("abstain-live-cache.jsonl"))?;
    let q = QuestionRecord::new("1", "What is George Rankin's occupation?", ["politician"])?;
    let prompt = render_prompt(&q, &RewardConfig::scheme_b(1.0, 1.0, 0.4))?;

    let (completion, status) = cached_complete(&prompt, &cfg, &cache, &transport)?;
    println!(
        "{status:?} after {} attempt(s)\n{}",
        completion.attempts(),
        completion.text
    );
    println!("{:?}", evaluated_answer(&parse_response(&completion.text)));
    Ok(())
}
