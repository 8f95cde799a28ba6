//! Farthest point sampling, k-nearest-neighbour grouping and Morton ordering
//! of one synthetic cloud.

use pointar::data::{generate_pool, Pool};
use pointar::geometry::{fps, knn, morton_keys, normalize_patches, sort_by_morton};

fn main() -> pointar::Result<()> {
    let record = &generate_pool(Pool::A, 1, 1024, 0)?[0];
    let centers = fps(&record.cloud, 16, 0)?;
    let patches = knn(&centers, &record.cloud, 32)?;
    let (order, centers, patches) = sort_by_morton(&centers, &patches)?;
    let local = normalize_patches(&patches, &centers)?;

    println!("rank  fps idx  morton key          center");
    for (rank, (c, key)) in centers.centers.iter().zip(morton_keys(&centers)).enumerate() {
        println!(
            "{rank:>4}  {:>7}  {:#018x}  ({:+.3}, {:+.3}, {:+.3})",
            order.order[rank], key.0, c[0], c[1], c[2]
        );
    }
    let radius = local
        .points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    println!("largest patch radius after centering: {radius:.3}");
    Ok(())
}
