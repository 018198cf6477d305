// Build a small model, run the image encoder and decoder, compute the
// teacher-forcing loss, and save and reload a checkpoint.

use longrep::corpus::{generate_corpus, GeneratorConfig, SplitSizes};
use longrep::model::{
    decode_forward, encode_images, init_model, load_checkpoint, lora_param_count, prepare_images, save_checkpoint,
    teacher_forcing_loss, ModelConfig, ParamGroup,
};
use longrep::pipeline::train_vocabulary;
use longrep::tokenizer::{assemble_prompt, assemble_target, StreamMode, TokenStream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&GeneratorConfig { patients: SplitSizes { train: 30, validation: 0, test: 0 }, image_side: 32, ..Default::default() })?;
    let vocab = train_vocabulary(&corpus, 300)?;
    let cfg = ModelConfig { d_model: 32, layers: 2, heads: 4, ff_width: 64, vocab_size: vocab.size(), image_side: 28, patch_size: 7, encoder_width: 24, ..Default::default() };
    let state = init_model(&cfg)?;
    for g in [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Lora] {
        println!("{g:?}: {} parameters", state.num_params(Some(g)));
    }
    println!("LoRA on q/k of a 6-layer, 768-wide decoder at rank 8: {}", lora_param_count(6, 768, 8, 2));

    let study = &corpus.train[0].studies[0];
    let images = prepare_images(&study.images, cfg.image_side, false, 0);
    let enc = encode_images(&images, &state)?;
    let prompt = assemble_prompt(None, None, &vocab, 64)?;
    let target = assemble_target(&study.findings, &study.impression, &vocab, 128, StreamMode::Training)?;
    let stream = TokenStream::join(&prompt, &target);
    let logits = decode_forward(&stream, &enc, &state)?;
    println!("{} images -> logits {}x{}", images.len(), logits.rows(), logits.cols());
    let loss = teacher_forcing_loss(&stream, &enc, &state)?;
    println!("untrained loss {loss:.3} (ln |V| = {:.3})", (vocab.size() as f64).ln());

    let path = std::env::temp_dir().join(format!("longrep-model-{}.ckpt", std::process::id()));
    save_checkpoint(&state, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back, state);
    println!("checkpoint round-trip ok ({} bytes)", std::fs::metadata(&path)?.len());
    std::fs::remove_file(&path)?;
    Ok(())
}
