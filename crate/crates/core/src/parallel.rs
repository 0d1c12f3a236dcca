use rayon::prelude::*;

use crate::error::Result;
use crate::mesh::Mesh;

/// Runs `f` on every cell in parallel and returns results in cell order.
pub(crate) fn map_cells<T, F>(mesh: &Mesh, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..mesh.n_cells()).into_par_iter().map(f).collect()
}
