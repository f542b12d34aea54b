//! Flat little-endian binary blobs for path batches and trained networks.
//!
//! Both formats start with an 8-byte magic tag followed by `u64` header
//! fields; every payload float is a little-endian `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::levy::JumpPartition;
use crate::paths::{IncrementBatch, ModelCoefficients, PathBatch, TimeGrid};
use crate::solver::{StepNetworks, TrainedSolution};

const PATHS_MAGIC: &[u8; 8] = b"JBSDEPB1";
const NETS_MAGIC: &[u8; 8] = b"JBSDENN1";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn len(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }
    fn floats(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.len(v.len())?;
        Ok(self.0.write_all(v)?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let mut raw = Vec::new();
        (&mut self.0).take(8 * n as u64).read_to_end(&mut raw)?;
        if raw.len() != 8 * n {
            return Err(Error::Format("truncated float block".into()));
        }
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut raw = Vec::new();
        (&mut self.0).take(n as u64).read_to_end(&mut raw)?;
        if raw.len() != n {
            return Err(Error::Format("truncated byte block".into()));
        }
        Ok(raw)
    }
    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let mut m = [0u8; 8];
        self.0.read_exact(&mut m)?;
        if &m != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }
}

fn check(cond: bool, what: &str) -> Result<()> {
    if cond { Ok(()) } else { Err(Error::Format(what.into())) }
}

/// Header: `q, d, N, batch, seed`; payload: grid nodes, `Σ_ε^{1/2}`, cell
/// masses, states, validity, Brownian increments and jump records.
pub fn write_paths<W: Write>(paths: &PathBatch, out: W) -> Result<()> {
    let mut w = Writer(out);
    let inc = &paths.increments;
    w.0.write_all(PATHS_MAGIC)?;
    for v in [paths.q, inc.d, paths.steps(), paths.batch()] {
        w.len(v)?;
    }
    w.u64(paths.seed)?;
    w.floats(paths.grid.nodes())?;
    w.floats(&paths.sigma_sqrt)?;
    w.floats(&inc.masses)?;
    w.floats(&paths.states)?;
    w.bytes(&paths.valid.iter().map(|&v| v as u8).collect::<Vec<_>>())?;
    w.floats(&inc.dw)?;
    w.floats(&inc.dw_tilde)?;
    w.len(inc.jump_offsets.len())?;
    for &o in &inc.jump_offsets {
        w.len(o)?;
    }
    w.len(inc.jump_cells.len())?;
    for &c in &inc.jump_cells {
        w.u64(c as u64)?;
    }
    w.floats(&inc.jump_sizes)?;
    w.bytes(paths.fingerprint.as_bytes())?;
    Ok(())
}

pub fn read_paths<R: Read>(input: R) -> Result<PathBatch> {
    let mut r = Reader(input);
    r.magic(PATHS_MAGIC)?;
    let (q, d, n, batch) = (r.len()?, r.len()?, r.len()?, r.len()?);
    let seed = r.u64()?;
    let grid = TimeGrid::from_nodes(r.floats()?)?;
    check(grid.steps() == n, "grid length disagrees with N")?;
    let sigma_sqrt = r.floats()?;
    check(sigma_sqrt.len() == q * q, "Σ block has wrong size")?;
    let masses = r.floats()?;
    let states = r.floats()?;
    check(states.len() == batch * (n + 1) * q, "state block has wrong size")?;
    let valid: Vec<bool> = r.bytes()?.into_iter().map(|b| b != 0).collect();
    check(valid.len() == batch, "validity block has wrong size")?;
    let dw = r.floats()?;
    let dw_tilde = r.floats()?;
    check(dw.len() == batch * n * d && dw_tilde.len() == batch * n * q, "increment block has wrong size")?;
    let offsets = (0..r.len()?).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    check(offsets.len() == batch * n + 1, "offset block has wrong size")?;
    let cells = (0..r.len()?)
        .map(|_| r.u64().and_then(|c| u32::try_from(c).map_err(|_| Error::Format("cell index overflow".into()))))
        .collect::<Result<Vec<_>>>()?;
    let sizes = r.floats()?;
    check(sizes.len() == cells.len() && offsets.last() == Some(&cells.len()), "jump block is inconsistent")?;
    check(offsets.windows(2).all(|w| w[0] <= w[1]), "jump offsets are not monotone")?;
    check(cells.iter().all(|&c| (c as usize) < masses.len()), "jump cell out of range")?;
    let fingerprint = String::from_utf8(r.bytes()?).map_err(|_| Error::Format("fingerprint is not UTF-8".into()))?;
    let increments = IncrementBatch {
        batch,
        steps: n,
        d,
        q,
        dt: (0..n).map(|i| grid.dt(i)).collect(),
        masses,
        dw,
        dw_tilde,
        jump_offsets: offsets,
        jump_cells: cells,
        jump_sizes: sizes,
    };
    Ok(PathBatch { grid, q, states, increments, valid, seed, fingerprint, sigma_sqrt })
}

/// Header: `q, d, ζ, hidden layers, width, N`; payload: the flat parameter
/// vector of each step, the time nodes and the training provenance string.
pub fn write_networks<W: Write>(solution: &TrainedSolution, out: W) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(NETS_MAGIC)?;
    let first = solution
        .steps
        .first()
        .ok_or_else(|| Error::InvalidArgument("solution has no trained steps".into()))?;
    let widths = first.y.widths();
    let q = widths[0];
    let d = first.z.n_out();
    for v in [q, d, first.w.is_some() as usize, widths.len() - 2, widths[1], solution.steps.len()] {
        w.len(v)?;
    }
    for s in &solution.steps {
        w.floats(&s.to_flat())?;
    }
    w.floats(solution.grid.nodes())?;
    w.bytes(solution.config_fingerprint.as_bytes())?;
    Ok(())
}

/// Rebuilds a solution from stored networks; the terminal map and the
/// partition come from the caller.
pub fn read_networks<R: Read>(
    input: R,
    coeffs: &ModelCoefficients,
    partition: &JumpPartition,
    x0: &[f64],
) -> Result<TrainedSolution> {
    let mut r = Reader(input);
    r.magic(NETS_MAGIC)?;
    let (q, d, zeta, hidden, width, n) = (r.len()?, r.len()?, r.len()? != 0, r.len()?, r.len()?, r.len()?);
    if q != coeffs.q || d != coeffs.d || zeta != coeffs.zeta {
        return Err(Error::Dimension(format!(
            "stored networks have q={q}, d={d}, zeta={zeta}; model has q={}, d={}, zeta={}",
            coeffs.q, coeffs.d, coeffs.zeta
        )));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = StepNetworks::zeros(q, d, zeta, hidden, width)?;
        s.set_flat(&r.floats()?)?;
        steps.push(s);
    }
    let grid = TimeGrid::from_nodes(r.floats()?)?;
    check(grid.steps() == n, "grid length disagrees with the number of steps")?;
    let provenance = String::from_utf8(r.bytes()?).map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
    let mut solution = TrainedSolution::from_parts(grid, steps, coeffs, partition, x0)?;
    solution.config_fingerprint = provenance;
    Ok(solution)
}
