//! Poincaré-disk export of entity tables.

use std::path::Path;

use gtr_core::data::Vocab;
use gtr_core::embeddings::{EntityKind, EntityTables};
use gtr_core::manifold::{exp_o, to_poincare, TangentVector};

use crate::error::Result;
use crate::formats::write_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct DiskPoint {
    pub kind: EntityKind,
    pub id: usize,
    /// Euclidean norm of the full Poincaré-ball coordinates.
    pub radius: f64,
    /// Angle of the first two ball coordinates.
    pub angle: f64,
    pub x: f64,
    pub y: f64,
}

/// One row per entity of every table.
pub fn disk_points(tables: &EntityTables) -> Result<Vec<DiskPoint>> {
    let mut out = Vec::new();
    for t in &tables.tables {
        for i in 0..t.len() {
            let p = to_poincare(&exp_o(&TangentVector::new(t.vectors.row(i).to_vec()))?);
            let radius = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x = p.first().copied().unwrap_or(0.0);
            let y = p.get(1).copied().unwrap_or(0.0);
            out.push(DiskPoint { kind: t.kind, id: i, radius, angle: y.atan2(x), x, y });
        }
    }
    Ok(out)
}

/// Mean radius per entity kind, indexed by [`EntityKind::index`].
pub fn mean_radii(points: &[DiskPoint]) -> [f64; 4] {
    EntityKind::ALL.map(|k| {
        let r: Vec<f64> = points.iter().filter(|p| p.kind == k).map(|p| p.radius).collect();
        if r.is_empty() {
            f64::NAN
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    })
}

/// Writes `viz_points.csv` and, with a vocabulary, `viz_links.csv`.
pub fn export_poincare_viz(dir: &Path, tables: &EntityTables, vocab: Option<&Vocab>) -> Result<Vec<DiskPoint>> {
    let points = disk_points(tables)?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.kind.name().to_string(),
                p.id.to_string(),
                p.radius.to_string(),
                p.angle.to_string(),
                p.x.to_string(),
                p.y.to_string(),
            ]
        })
        .collect();
    write_rows(&dir.join("viz_points.csv"), &["kind", "id", "radius", "angle", "x", "y"], &rows)?;
    if let Some(v) = vocab {
        let links: Vec<Vec<String>> =
            v.pois.iter().enumerate().map(|(i, p)| vec![i.to_string(), p.category.to_string()]).collect();
        write_rows(&dir.join("viz_links.csv"), &["poi", "category"], &links)?;
    }
    Ok(points)
}
