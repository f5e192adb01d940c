//! Checkpoint file format.
//!
//! One JSON header line (structure, sizes, mask, seeds, certificate ids)
//! followed by a raw little-endian f64 payload in declared order:
//! subnetwork weight blocks, subnetwork metrics, B, input layer (weights then
//! bias), output layer (weights then bias), and — when training state is
//! attached — the flat parameter vector and both Adam moment vectors.
//! Matrices are serialized row-major.

use crate::certificates::{Certificate, TheoremId};
use crate::composition::{ComposedNetwork, InterconnectionMask, SubnetworkSpec};
use crate::numerics::{from_row_major, to_row_major, Matrix, Vector};
use crate::training::Variant;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Composition(#[from] crate::composition::CompositionError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Seeds {
    #[serde(default)]
    pub init: Option<u64>,
    #[serde(default)]
    pub train: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainStateHeader {
    param_len: usize,
    step_count: u64,
    lr: f64,
    epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: String,
    variant: Variant,
    p: usize,
    sizes: Vec<usize>,
    g: f64,
    tau: f64,
    mask: Vec<(usize, usize)>,
    all_blocks: bool,
    control_mode: bool,
    in_dim: usize,
    out_dim: usize,
    seeds: Seeds,
    theorem_ids: Vec<TheoremId>,
    margins: Vec<f64>,
    payload_f64: usize,
    train: Option<TrainStateHeader>,
}

/// Detachable training state (the flat parameters and Adam moments).
#[derive(Debug, Clone)]
pub struct TrainStatePayload {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: ComposedNetwork,
    pub variant: Variant,
    pub seeds: Seeds,
    pub train: Option<TrainStatePayload>,
}

fn push_matrix(buf: &mut Vec<f64>, m: &Matrix) {
    buf.extend(to_row_major(m));
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let net = &ckpt.net;
    let mut payload: Vec<f64> = Vec::new();
    for s in &net.subnets {
        push_matrix(&mut payload, &s.w);
    }
    for s in &net.subnets {
        push_matrix(&mut payload, &s.metric);
    }
    push_matrix(&mut payload, &net.b);
    push_matrix(&mut payload, &net.input_w);
    payload.extend(net.input_b.iter());
    push_matrix(&mut payload, &net.output_w);
    payload.extend(net.output_b.iter());
    let train = ckpt.train.as_ref().map(|t| {
        payload.extend(&t.params);
        payload.extend(&t.m);
        payload.extend(&t.v);
        TrainStateHeader {
            param_len: t.params.len(),
            step_count: t.step_count,
            lr: t.lr,
            epoch: t.epoch,
        }
    });
    let header = Header {
        version: crate::VERSION.to_string(),
        variant: ckpt.variant,
        p: net.subnets.len(),
        sizes: net.subnets.iter().map(|s| s.units()).collect(),
        g: net.slope_bound(),
        tau: net.tau,
        mask: net.mask.pairs().collect(),
        all_blocks: net.mask.all_blocks,
        control_mode: net.control_mode,
        in_dim: net.in_dim(),
        out_dim: net.out_dim(),
        seeds: ckpt.seeds.clone(),
        theorem_ids: net.subnets.iter().map(|s| s.cert.theorem_id).collect(),
        margins: net.subnets.iter().map(|s| s.cert.margin).collect(),
        payload_f64: payload.len(),
        train,
    };
    let wrap = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let mut header_line =
        serde_json::to_string(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    header_line.push('\n');
    file.write_all(header_line.as_bytes()).map_err(wrap)?;
    for v in &payload {
        file.write_all(&v.to_le_bytes()).map_err(wrap)?;
    }
    file.flush().map_err(wrap)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let wrap = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(wrap)?
        .read_to_end(&mut bytes)
        .map_err(wrap)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let body = &bytes[newline + 1..];
    if body.len() != header.payload_f64 * 8 {
        return Err(CheckpointError::Format(format!(
            "payload is {} bytes, header declares {}",
            body.len(),
            header.payload_f64 * 8
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    if header.sizes.len() != header.p
        || header.theorem_ids.len() != header.p
        || header.margins.len() != header.p
    {
        return Err(CheckpointError::Format(
            "sizes/theorem_ids/margins do not match p".into(),
        ));
    }

    let mut pos = 0usize;
    let mut take = |count: usize| -> Result<&[f64]> {
        if pos + count > floats.len() {
            return Err(CheckpointError::Format("payload too short".into()));
        }
        let s = &floats[pos..pos + count];
        pos += count;
        Ok(s)
    };
    let mut ws = Vec::with_capacity(header.p);
    for &sz in &header.sizes {
        ws.push(from_row_major(sz, sz, take(sz * sz)?)?);
    }
    let mut metrics = Vec::with_capacity(header.p);
    for &sz in &header.sizes {
        metrics.push(from_row_major(sz, sz, take(sz * sz)?)?);
    }
    let n: usize = header.sizes.iter().sum();
    let b = from_row_major(n, n, take(n * n)?)?;
    let input_w = from_row_major(n, header.in_dim, take(n * header.in_dim)?)?;
    let input_b = Vector::from_column_slice(take(n)?);
    let output_w = from_row_major(header.out_dim, n, take(header.out_dim * n)?)?;
    let output_b = Vector::from_column_slice(take(header.out_dim)?);

    let train = match &header.train {
        Some(t) => {
            let params = take(t.param_len)?.to_vec();
            let m = take(t.param_len)?.to_vec();
            let v = take(t.param_len)?.to_vec();
            Some(TrainStatePayload {
                params,
                m,
                v,
                step_count: t.step_count,
                lr: t.lr,
                epoch: t.epoch,
            })
        }
        None => None,
    };
    if pos != floats.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing floats in payload",
            floats.len() - pos
        )));
    }

    let subnets: Vec<SubnetworkSpec> = (0..header.p)
        .map(|i| SubnetworkSpec {
            w: ws[i].clone(),
            metric: metrics[i].clone(),
            g: header.g,
            cert: Certificate {
                theorem_id: header.theorem_ids[i],
                w: ws[i].clone(),
                g: header.g,
                metric: metrics[i].clone(),
                margin: header.margins[i],
                notes: String::new(),
            },
        })
        .collect();
    let mask = InterconnectionMask::from_pairs(header.p, header.mask.iter().copied())?
        .with_all_blocks(header.all_blocks);
    let net = ComposedNetwork::assemble(
        subnets,
        mask,
        b,
        header.tau,
        input_w,
        input_b,
        output_w,
        output_b,
        header.control_mode,
    )?;
    Ok(Checkpoint {
        net,
        variant: header.variant,
        seeds: header.seeds,
        train,
    })
}
