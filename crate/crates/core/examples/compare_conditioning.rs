// Train image-only, multi-image and longitudinal models on one corpus and
// tabulate their test scores.

use longrep::config::RunConfig;
use longrep::corpus::generate_corpus;
use longrep::pipeline::{compare, conditioning_name, train_vocabulary};

const CONFIG: &str = r#"
[corpus]
patients = { train = 40, validation = 6, test = 6 }
image_side = 24

[tokenizer]
budget = 280

[model]
d_model = 32
layers = 1
heads = 2
ff_width = 64
max_positions = 384
image_side = 16
patch_size = 8
encoder_width = 12

[teacher_forcing]
lr = 3e-3
epochs = 6
max_prompt = 128
max_target = 224
max_new_tokens = 160

[adaptation]
lr = 1e-3
epochs = 2
max_prompt = 128
max_target = 224
max_new_tokens = 160

[decode]
strategy = "greedy"
max_new_tokens = 160
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = RunConfig::from_toml(CONFIG, &[])?;
    let corpus = generate_corpus(&run.corpus)?;
    let vocab = train_vocabulary(&corpus, run.tokenizer.budget)?;
    let table = compare(&corpus, &vocab, &run, &[0, 1], |m| {
        println!("trained {} (seed {})", conditioning_name(m.conditioning), m.seed);
        Ok(())
    })?;
    for row in &table.modes {
        println!("{:<13} F1 {}  BLEU-4 {}", conditioning_name(row.conditioning), row.summary.f1, row.summary.bleu4);
    }
    print!("\n{}", table.modes_csv());
    print!("\n{}", table.prompts_csv());
    Ok(())
}
