//! Chamfer distance in both forms, and its behaviour under translation.

use pointar::geometry::Point;
use pointar::loss::{chamfer, ChamferForm};

fn main() -> pointar::Result<()> {
    let square: Vec<Point> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
    let lifted: Vec<Point> = square.iter().map(|p| [p[0], p[1], 0.5]).collect();
    let corner: Vec<Point> = vec![[0.0, 0.0, 0.0]];
    for form in [ChamferForm::L1, ChamferForm::L2] {
        println!("{form:?}");
        println!("  square vs itself      {:.4}", chamfer(&square, &square, form)?);
        println!("  square vs lifted 0.5  {:.4}", chamfer(&square, &lifted, form)?);
        println!("  square vs corner      {:.4}", chamfer(&square, &corner, form)?);
        println!("  corner vs square      {:.4}", chamfer(&corner, &square, form)?);
    }
    Ok(())
}
