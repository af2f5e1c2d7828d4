//! Loads MNIST from `$LMT_DATA_DIR` (or `./data`) and walks one epoch of
//! seeded batches.

use std::collections::BTreeMap;

use lmt::mnist::{resolve_data_dir, Dataset, Split};

fn main() -> lmt::Result<()> {
    let dir = resolve_data_dir(None);
    for split in [Split::Train, Split::Test] {
        let data = Dataset::load(&dir, split)?;
        let mut counts = BTreeMap::new();
        for &l in &data.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        let px = data.images.data();
        let max = px.iter().copied().fold(f64::MIN, f64::max);
        let min = px.iter().copied().fold(f64::MAX, f64::min);
        println!("{split:?}: {} images of {} pixels in [{min}, {max}]", data.len(), data.dim());
        println!("  label counts {counts:?}");
    }

    let train = Dataset::load(&dir, Split::Train)?;
    let batches: Vec<_> = train.batches(128, 0, 0)?.collect();
    let last = batches.last().expect("non-empty");
    println!(
        "epoch 0: {} batches, first indices {:?}, last batch size {}",
        batches.len(),
        &batches[0].indices[..5],
        last.labels.len()
    );
    Ok(())
}
