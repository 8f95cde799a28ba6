//! Generates both synthetic pools, writes them with a split manifest, and
//! reads them back.

use std::collections::BTreeMap;

use pointar::data::{generate_pool, load_dataset, make_splits, save_dataset, DatasetManifest, Pool, Split};

fn main() -> pointar::Result<()> {
    let dir = std::env::temp_dir().join("pointar-example-pools");
    std::fs::create_dir_all(&dir)?;
    for pool in [Pool::A, Pool::B] {
        let records = generate_pool(pool, 60, 512, 7)?;
        let manifest = make_splits(&DatasetManifest::from_records(&records, 7), 7, [0.6, 0.2, 0.2])?;
        let path = dir.join(format!("pool_{pool}.pgpt"));
        save_dataset(&path, &records)?;
        manifest.save(&path.with_extension("manifest"))?;

        let back = load_dataset(&path)?;
        assert_eq!(back.len(), records.len());
        let mut per_class = BTreeMap::new();
        for r in &back {
            *per_class.entry(manifest.class_names[r.label].clone()).or_insert(0) += 1;
        }
        println!("pool {pool} -> {}", path.display());
        println!("  classes: {per_class:?}");
        for split in Split::ALL {
            println!("  {split}: {} clouds", manifest.indices(split).len());
        }
    }
    Ok(())
}
