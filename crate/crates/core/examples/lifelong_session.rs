//! Five sessions of data-free distillation, one few-shot concept each. After
//! every session the earlier concepts are sampled again to watch forgetting.
//!
//!     cargo run --example lifelong_session [plain_ft|lwf|ours|student_trajectory]

use lifelong_diffusion::concepts::{build_prompt_sets, make_fewshot, sample_concept};
use lifelong_diffusion::config::{ExperimentConfig, Method};
use lifelong_diffusion::eval::image_alignment;
use lifelong_diffusion::rng::{indexed_stream, stream};
use lifelong_diffusion::sampler::sample;
use lifelong_diffusion::trainer::{pretrain_base, train_session, SessionState};

fn main() -> lifelong_diffusion::Result<()> {
    let method: Method = std::env::args().nth(1).as_deref().unwrap_or("ours").parse()?;
    let mut config = ExperimentConfig::default();
    config.icgen.guidance = 1.0;
    let (sched, distill) = (config.train_schedule()?, config.distill_schedule()?);
    let sessions = config.sessions()?;
    let base_tokens = config.base_tokens();
    let pairs: Vec<_> = sessions.iter().map(|s| (s.spec.token, s.base_token)).collect();

    let model = pretrain_base(config.model.clone(), &config.pretrain, &config.world.base, &sched, &mut stream(0, "pretrain"))?;
    let mut state = SessionState::new(model);
    let train = config.train_config(method, 0);
    println!("method {method}, KD weight {}", train.lambda);

    for s in &sessions {
        let fewshot = make_fewshot(&s.spec, s.k, &mut indexed_stream(0, "fewshot", s.index))?;
        let prompts = build_prompt_sets(s.index, &base_tokens, &pairs)?;
        state.model.copy_token_embedding(s.base_token, s.spec.token)?;
        let (next, report) = train_session(state, fewshot, &prompts, &train, &sched, &distill, &mut indexed_stream(0, "train", s.index))?;
        state = next;
        let last = report.trace.last().unwrap();
        print!("session {} (L_DM {:.3}, L_KD {:.3}):", s.index, last.l_dm, last.l_kd);
        for earlier in &sessions[..s.index] {
            let gen = sample(&state.model, earlier.spec.token, &sched, 1.0, &mut stream(0, "gen"), 300)?;
            let refs = sample_concept(&earlier.spec, 300, &mut stream(0, "ref"))?;
            print!("  IA[{}] {:.3}", earlier.spec.token, image_alignment(&gen, &refs)?);
        }
        println!();
    }
    Ok(())
}
