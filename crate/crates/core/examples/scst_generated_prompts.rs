// Self-critical fine-tuning of a longitudinal model whose prompts are its
// own reports for the previous studies.

use longrep::config::RunConfig;
use longrep::corpus::generate_corpus;
use longrep::metrics::Conditioning;
use longrep::pipeline::{scst, teacher_forcing, train_vocabulary};
use longrep::training::PromptSource;

const CONFIG: &str = r#"
[corpus]
patients = { train = 24, validation = 4, test = 2 }
image_side = 24

[tokenizer]
budget = 300

[model]
d_model = 16
layers = 1
heads = 2
ff_width = 32
max_positions = 256
image_side = 16
patch_size = 8
encoder_width = 12

[teacher_forcing]
lr = 3e-3
epochs = 6
max_prompt = 96
max_target = 128
max_new_tokens = 48

[scst]
lr = 1e-4
batch_size = 4
validations_per_epoch = 2
top_k = 20
max_prompt = 96
max_target = 128
max_new_tokens = 48
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = RunConfig::from_toml(CONFIG, &[])?;
    let corpus = generate_corpus(&run.corpus)?;
    let vocab = train_vocabulary(&corpus, run.tokenizer.budget)?;
    let tf = teacher_forcing(&corpus, &vocab, &run, Conditioning::Longitudinal, None)?;

    let out = scst(&corpus, &vocab, &run, tf.best, Conditioning::Longitudinal, PromptSource::GeneratedPrev)?;
    for s in out.manifest.steps() {
        println!(
            "step {:>2}: sample reward {:.4}, greedy baseline {:.4}",
            s.step,
            s.sample_reward.unwrap_or(f64::NAN),
            s.baseline_reward.unwrap_or(f64::NAN)
        );
    }
    for v in out.manifest.validations() {
        println!("{:<14} reward {:.4}  F1 {:.4}", v.checkpoint, v.reward, v.f1);
    }
    // Each study's prompt came from the batch before it.
    let plan = &out.plans[0];
    println!("{} batches, staleness {:?}, cache peak {:?}", plan.batches.len(), plan.staleness_histogram, out.manifest.cache_peak);
    Ok(())
}
