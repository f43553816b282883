//! In-context generation: start the reverse process from a stored context
//! noised to T·s instead of from pure noise. Sweeps the strength s.
//!
//!     cargo run --example icgen

use lifelong_diffusion::concepts::{build_prompt_sets, make_fewshot, sample_concept};
use lifelong_diffusion::config::{ExperimentConfig, Method};
use lifelong_diffusion::eval::image_alignment;
use lifelong_diffusion::icgen::{icgen_generate, strength_steps};
use lifelong_diffusion::rng::{indexed_stream, stream};
use lifelong_diffusion::trainer::{pretrain_base, train_session, SessionState};

fn main() -> lifelong_diffusion::Result<()> {
    let config = ExperimentConfig::default();
    let (sched, distill) = (config.train_schedule()?, config.distill_schedule()?);
    let session = &config.sessions()?[0];
    let model = pretrain_base(config.model.clone(), &config.pretrain, &config.world.base, &sched, &mut stream(0, "pretrain"))?;

    let mut state = SessionState::new(model);
    state.model.copy_token_embedding(session.base_token, session.spec.token)?;
    let fewshot = make_fewshot(&session.spec, session.k, &mut indexed_stream(0, "fewshot", 1))?;
    let prompts = build_prompt_sets(1, &config.base_tokens(), &[(session.spec.token, session.base_token)])?;
    let (state, _) = train_session(state, fewshot, &prompts, &config.train_config(Method::Ours, 0), &sched, &distill, &mut stream(0, "train"))?;

    let refs = sample_concept(&session.spec, 400, &mut stream(0, "ref"))?;
    let token = session.spec.token;
    println!("bank holds {} contexts for token {token}", state.context_bank.contexts(token).unwrap().len());
    for s in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let gen = icgen_generate(&state.model, &state.context_bank, token, s, &sched, 1.0, &mut stream(0, "icgen"), 400)?;
        println!("s {s:.1}  T' {:>2}  IA {:.3}", strength_steps(sched.len(), s), image_alignment(&gen, &refs)?);
    }
    Ok(())
}
