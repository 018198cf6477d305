// Generate a small synthetic corpus, print its statistics, and round-trip
// it through the JSONL files.

use longrep::corpus::{generate_corpus, read_corpus, write_corpus, GeneratorConfig, SplitName, SplitSizes};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GeneratorConfig { patients: SplitSizes { train: 60, validation: 8, test: 8 }, image_side: 32, ..Default::default() };
    let corpus = generate_corpus(&cfg)?;
    for name in SplitName::ALL {
        let s = corpus.stats(name);
        println!(
            "{:<10} {:>3} patients {:>4} studies ({} with a previous study), persistence {:.3}",
            name.as_str(),
            s.patients,
            s.studies,
            s.with_previous,
            s.label_persistence
        );
    }

    let first = &corpus.train[0].studies[0];
    println!("\n{} study {} ({} images)", first.patient_id, first.study_index, first.images.len());
    println!("findings:   {}", first.findings);
    println!("impression: {}", first.impression);

    let dir = std::env::temp_dir().join(format!("longrep-corpus-{}", std::process::id()));
    write_corpus(&corpus, &dir)?;
    let back = read_corpus(&dir)?;
    assert_eq!(back.digest(), corpus.digest());
    println!("\nwrote and re-read {} (digest {})", dir.display(), &corpus.digest()[..16]);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
