// Plan an epoch so each study's predecessor sits in the previous batch,
// then walk the plan with the prompt cache.

use longrep::scheduler::{plan_epoch, CachedPrompt, PromptCache};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let patients: Vec<(String, usize)> =
        [("ann", 3), ("bo", 1), ("cy", 2), ("di", 4), ("ed", 1), ("flo", 2)].iter().map(|(p, n)| (p.to_string(), *n)).collect();
    let batch_size = 3;
    let plan = plan_epoch(&patients, batch_size, 7);
    plan.validate(&patients)?;
    for (b, batch) in plan.batches.iter().enumerate() {
        let keys: Vec<String> = batch.iter().map(|k| format!("{}#{}", k.patient_id, k.study_index)).collect();
        println!("batch {b}: {}", keys.join(" "));
    }
    println!("staleness histogram: {:?}", plan.dump().staleness_histogram);

    // Each batch takes its prompts, then stores its own reports for the
    // patients' next studies.
    let last: std::collections::HashMap<&str, usize> = patients.iter().map(|(p, n)| (p.as_str(), *n)).collect();
    let mut cache = PromptCache::new(batch_size);
    for batch in &plan.batches {
        for k in batch {
            match cache.take(&k.patient_id, k.study_index)? {
                CachedPrompt::NoPrevious => {}
                CachedPrompt::Generated(ids) => assert_eq!(ids, vec![k.study_index as u32 - 1]),
            }
        }
        for k in batch {
            if k.study_index < last[k.patient_id.as_str()] {
                cache.put(&k.patient_id, k.study_index, vec![k.study_index as u32])?;
            }
        }
    }
    assert!(cache.is_empty());
    println!("cache peak {} of capacity {}", cache.peak(), cache.capacity());
    Ok(())
}
