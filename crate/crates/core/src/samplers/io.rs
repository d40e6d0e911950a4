//! Trace persistence.
//!
//! Binary layout (little-endian): the magic `MHCVTRC1`; `kind: u8` (0 RWM,
//! 1 MALA); `has_grads: u8`; `dim: u64`; `n: u64`; `step2: f64`;
//! `non_finite: u64`; `n_adapt: u64` followed by that many `f64`; then `n`
//! rows of `x[dim], y[dim], alpha: f64, accepted: u8` and, when gradients
//! are present, `grad_x[dim], grad_y[dim]`. Values are stored bit for bit.
//!
//! CSV layout: a `# kind=<rwm|mala> step2=<c2>` line, then a header
//! `x0..x{d-1}, y0..y{d-1}, alpha, accepted` (plus `gx*, gy*` for MALA).
//! Floats are written in shortest round-trip form. The CSV carries no
//! adaptation history or non-finite counter; the final state is recovered
//! from the last row.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use super::{Algorithm, ChainTrace};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MHCVTRC1";

fn put_f64s(w: &mut impl Write, v: &DVector<f64>) -> std::io::Result<()> {
    for x in v.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_trace(trace: &ChainTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let grads = trace.grad_at_state.as_ref().zip(trace.grad_at_proposal.as_ref());
    w.write_all(MAGIC)?;
    w.write_all(&[
        match trace.kind {
            Algorithm::Rwm => 0,
            Algorithm::Mala => 1,
        },
        grads.is_some() as u8,
    ])?;
    w.write_all(&(trace.dim() as u64).to_le_bytes())?;
    w.write_all(&(trace.len() as u64).to_le_bytes())?;
    w.write_all(&trace.step2.to_le_bytes())?;
    w.write_all(&(trace.non_finite as u64).to_le_bytes())?;
    w.write_all(&(trace.adapt_history.len() as u64).to_le_bytes())?;
    for c in &trace.adapt_history {
        w.write_all(&c.to_le_bytes())?;
    }
    put_f64s(&mut w, &trace.final_state)?;
    for i in 0..trace.len() {
        put_f64s(&mut w, &trace.states[i])?;
        put_f64s(&mut w, &trace.proposals[i])?;
        w.write_all(&trace.accept_prob[i].to_le_bytes())?;
        w.write_all(&[trace.accepted[i] as u8])?;
        if let Some((gx, gy)) = grads {
            put_f64s(&mut w, &gx[i])?;
            put_f64s(&mut w, &gy[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Bytes<R> {
    r: R,
}

impl<R: Read> Bytes<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated trace file: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }
    fn vec(&mut self, d: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(d);
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(v)
    }
}

pub fn read_trace(path: &Path) -> Result<ChainTrace> {
    let mut b = Bytes {
        r: BufReader::new(std::fs::File::open(path)?),
    };
    if &b.exact::<8>()? != MAGIC {
        return Err(Error::Format("not a trace file (bad magic)".into()));
    }
    let kind = match b.u8()? {
        0 => Algorithm::Rwm,
        1 => Algorithm::Mala,
        k => return Err(Error::Format(format!("unknown algorithm tag {k}"))),
    };
    let has_grads = b.u8()? == 1;
    let d = b.u64()? as usize;
    let n = b.u64()? as usize;
    let step2 = b.f64()?;
    let non_finite = b.u64()? as usize;
    let n_adapt = b.u64()? as usize;
    let adapt_history = (0..n_adapt).map(|_| b.f64()).collect::<Result<_>>()?;
    let final_state = b.vec(d)?;
    let mut t = ChainTrace {
        kind,
        step2,
        states: Vec::with_capacity(n),
        proposals: Vec::with_capacity(n),
        accept_prob: Vec::with_capacity(n),
        accepted: Vec::with_capacity(n),
        grad_at_state: has_grads.then(Vec::new),
        grad_at_proposal: has_grads.then(Vec::new),
        final_state,
        non_finite,
        adapt_history,
    };
    for _ in 0..n {
        t.states.push(b.vec(d)?);
        t.proposals.push(b.vec(d)?);
        t.accept_prob.push(b.f64()?);
        t.accepted.push(b.u8()? == 1);
        if has_grads {
            t.grad_at_state.as_mut().unwrap().push(b.vec(d)?);
            t.grad_at_proposal.as_mut().unwrap().push(b.vec(d)?);
        }
    }
    Ok(t)
}

pub fn write_trace_csv(trace: &ChainTrace, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# kind={} step2={}", trace.kind, trace.step2)?;
    let d = trace.dim();
    let grads = trace.grad_at_state.as_ref().zip(trace.grad_at_proposal.as_ref());
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend((0..d).map(|j| format!("y{j}")));
    header.push("alpha".into());
    header.push("accepted".into());
    if grads.is_some() {
        header.extend((0..d).map(|j| format!("gx{j}")));
        header.extend((0..d).map(|j| format!("gy{j}")));
    }
    w.write_record(&header)?;
    for i in 0..trace.len() {
        let mut row: Vec<String> = trace.states[i].iter().map(|v| v.to_string()).collect();
        row.extend(trace.proposals[i].iter().map(|v| v.to_string()));
        row.push(trace.accept_prob[i].to_string());
        row.push((trace.accepted[i] as u8).to_string());
        if let Some((gx, gy)) = grads {
            row.extend(gx[i].iter().map(|v| v.to_string()));
            row.extend(gy[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<ChainTrace> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let meta = first
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("trace CSV must start with a # metadata line".into()))?;
    let mut kind = None;
    let mut step2 = None;
    for kv in meta.split_whitespace() {
        match kv.split_once('=') {
            Some(("kind", v)) => kind = Some(v.parse::<Algorithm>()?),
            Some(("step2", v)) => {
                step2 = Some(v.parse::<f64>().map_err(|_| Error::Format(format!("bad step2 {v:?}")))?)
            }
            _ => {}
        }
    }
    let kind = kind.ok_or_else(|| Error::Format("trace CSV metadata lacks kind".into()))?;
    let step2 = step2.ok_or_else(|| Error::Format("trace CSV metadata lacks step2".into()))?;

    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let has_grads = header.len() == 4 * d + 2;
    if header.len() != 2 * d + 2 && !has_grads {
        return Err(Error::Format(format!(
            "unexpected trace CSV width {} for dimension {d}",
            header.len()
        )));
    }
    let mut t = ChainTrace {
        kind,
        step2,
        states: Vec::new(),
        proposals: Vec::new(),
        accept_prob: Vec::new(),
        accepted: Vec::new(),
        grad_at_state: has_grads.then(Vec::new),
        grad_at_proposal: has_grads.then(Vec::new),
        final_state: DVector::zeros(d),
        non_finite: 0,
        adapt_history: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        let slice = |k: usize| DVector::from_column_slice(&vals[k * d..(k + 1) * d]);
        t.states.push(slice(0));
        t.proposals.push(slice(1));
        t.accept_prob.push(vals[2 * d]);
        t.accepted.push(vals[2 * d + 1] != 0.0);
        if has_grads {
            let g = |k: usize| DVector::from_column_slice(&vals[2 * d + 2 + k * d..2 * d + 2 + (k + 1) * d]);
            t.grad_at_state.as_mut().unwrap().push(g(0));
            t.grad_at_proposal.as_mut().unwrap().push(g(1));
        }
    }
    let last = t.len().checked_sub(1).ok_or_else(|| Error::Format("empty trace".into()))?;
    t.final_state = if t.accepted[last] {
        t.proposals[last].clone()
    } else {
        t.states[last].clone()
    };
    Ok(t)
}
