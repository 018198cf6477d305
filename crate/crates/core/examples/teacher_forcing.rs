// Teacher-force a small longitudinal model from a TOML config and score it
// on the test split.

use longrep::config::RunConfig;
use longrep::corpus::generate_corpus;
use longrep::metrics::{Conditioning, EvalOptions, TfCosineEncoder};
use longrep::pipeline::{evaluate, teacher_forcing, train_vocabulary};

const CONFIG: &str = r#"
seed = 3

[corpus]
patients = { train = 60, validation = 8, test = 8 }
image_side = 24

[tokenizer]
budget = 300

[model]
d_model = 32
layers = 1
heads = 2
ff_width = 64
max_positions = 320
image_side = 16
patch_size = 8
encoder_width = 16

[teacher_forcing]
lr = 3e-3
epochs = 8
max_prompt = 128
max_target = 192
max_new_tokens = 96

[decode]
strategy = "greedy"
max_new_tokens = 96
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = RunConfig::from_toml(CONFIG, &[])?;
    let corpus = generate_corpus(&run.corpus)?;
    let vocab = train_vocabulary(&corpus, run.tokenizer.budget)?;

    let outcome = teacher_forcing(&corpus, &vocab, &run, Conditioning::Longitudinal, None)?;
    let steps = outcome.manifest.steps();
    println!("{} steps, loss {:.3} -> {:.3}", steps.len(), steps[0].loss, steps[steps.len() - 1].loss);
    for v in outcome.manifest.validations() {
        println!("{:<12} F1 {:.4}  reward {:.4}  missing [SEP] {:.3}", v.checkpoint, v.f1, v.reward, v.missing_sep_rate);
    }
    println!("selected {}", outcome.manifest.selected_checkpoint().unwrap_or("-"));

    let report = evaluate(&outcome.best, &vocab, &corpus.test, EvalOptions::new(Conditioning::Longitudinal), &run.decode, &TfCosineEncoder::default())?;
    let a = &report.aggregate;
    println!("test: {} studies, F1 {:.4}, BLEU-4 {:.4}, reward {:.4}", a.studies, a.f1, a.bleu4, a.reward);
    Ok(())
}
