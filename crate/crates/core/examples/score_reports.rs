// Score generated text against references: n-gram metrics, the rule-based
// labeler with macro F1, and the cosine reward.

use longrep::corpus::{generate_corpus, GeneratorConfig, SplitSizes};
use longrep::metrics::{
    bleu4, cider, cosine_reward, label_extract, macro_prf, report_text, rouge_l, Averaging, TfCosineEncoder,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&GeneratorConfig { patients: SplitSizes { train: 0, validation: 0, test: 20 }, image_side: 16, ..Default::default() })?;
    let studies: Vec<_> = corpus.test.iter().flat_map(|p| &p.studies).collect();
    let references: Vec<String> = studies.iter().map(|s| report_text(&s.findings, &s.impression)).collect();
    // A crude "generator": each study gets its neighbour's report.
    let candidates: Vec<String> = (0..references.len()).map(|i| references[(i + 1) % references.len()].clone()).collect();

    let (c, r) = (&candidates[0], &references[0]);
    println!("candidate: {c}\nreference: {r}");
    println!("BLEU-4 {:.4}  ROUGE-L {:.4}", bleu4(c, &[r]), rouge_l(c, r));
    let enc = TfCosineEncoder::default();
    println!("cosine reward {:.4}; identical text {:.4}", cosine_reward(c, r, &enc)?.value, cosine_reward(r, r, &enc)?.value);

    let pairs: Vec<(&str, Vec<&str>)> = candidates.iter().zip(&references).map(|(c, r)| (c.as_str(), vec![r.as_str()])).collect();
    let (_, mean_cider) = cider(&pairs)?;
    println!("corpus CIDEr {mean_cider:.4}");

    let predicted: Vec<_> = candidates.iter().map(|c| vec![label_extract(c)]).collect();
    let actual: Vec<_> = references.iter().map(|r| label_extract(r)).collect();
    let prf = macro_prf(&predicted, &actual, Averaging::StudyLevelMulti)?;
    println!("neighbour reports: macro F1 {:.4}, P {:.4}, R {:.4}", prf.f1, prf.precision, prf.recall);
    let perfect = macro_prf(&actual.iter().map(|a| vec![*a]).collect::<Vec<_>>(), &actual, Averaging::StudyLevelMulti)?;
    println!("reference reports: macro F1 {:.4}", perfect.f1);
    Ok(())
}
