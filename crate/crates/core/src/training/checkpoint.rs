//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DRNNCKPT`, a little-endian u32 version, a
//! u32-length-prefixed UTF-8 header of `key=value` lines describing the
//! payload (cell kind, dimensions, activation, seed, and for full models
//! the task, dropout, and vocabulary), then every parameter array in
//! declared order as raw little-endian f64. Declared order is: embedding,
//! then per layer W (if any), U, b, alpha logit (if any), dale signs (if
//! any), then the head weights and bias. Round trips are bit-exact.

use super::{Model, ModelConfig, Task, TrainError};
use crate::cells::{
    Activation, AlphaMode, CellKind, CellParameters, DalePlacement,
};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const MAGIC: &[u8; 8] = b"DRNNCKPT";
pub const VERSION: u32 = 1;

type Result<T> = std::result::Result<T, TrainError>;

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::BadCheckpoint(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(header: &str) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let hb = header.as_bytes();
        buf.extend_from_slice(&(hb.len() as u32).to_le_bytes());
        buf.extend_from_slice(hb);
        Writer { buf }
    }

    fn array(&mut self, data: &[f64]) {
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.array(t.data());
    }
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Result<(HashMap<String, String>, Reader<'a>)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(corrupt("truncated header"));
        }
        let header =
            std::str::from_utf8(&bytes[16..16 + hlen]).map_err(|_| corrupt("header not UTF-8"))?;
        let mut fields = HashMap::new();
        for line in header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        Ok((
            fields,
            Reader {
                rest: &bytes[16 + hlen..],
            },
        ))
    }

    fn array(&mut self, len: usize) -> Result<Vec<f64>> {
        if self.rest.len() < len * 8 {
            return Err(corrupt("truncated parameter array"));
        }
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            out.push(f64::from_le_bytes(
                self.rest[i * 8..(i + 1) * 8].try_into().unwrap(),
            ));
        }
        self.rest = &self.rest[len * 8..];
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(corrupt("trailing bytes"))
        }
    }
}

fn get<'m>(fields: &'m HashMap<String, String>, key: &str) -> Result<&'m str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| corrupt(format!("missing header field {key}")))
}

fn get_usize(fields: &HashMap<String, String>, key: &str) -> Result<usize> {
    get(fields, key)?
        .parse()
        .map_err(|_| corrupt(format!("bad integer for {key}")))
}

fn cell_header_fields(p: &CellParameters, seed: u64) -> String {
    format!(
        "kind={}\nhidden={}\ninput={}\nactivation={}\nalpha_mode={}\nseed={}\n",
        p.kind.name(),
        p.hidden_size,
        p.input_size,
        p.activation.name(),
        p.alpha_mode.name(),
        seed,
    )
}

fn write_cell_arrays(w: &mut Writer, p: &CellParameters) {
    if let Some(wt) = &p.w {
        w.tensor(wt);
    }
    w.tensor(&p.u);
    w.tensor(&p.b);
    if let Some(a) = &p.alpha_logit {
        w.tensor(a);
    }
    if let Some(signs) = &p.dale_signs {
        w.array(signs);
    }
}

fn read_cell_arrays(
    r: &mut Reader,
    kind: CellKind,
    hidden: usize,
    input: usize,
    activation: Activation,
    alpha_mode: AlphaMode,
) -> Result<CellParameters> {
    let gate = match kind {
        CellKind::Lstm => 4,
        CellKind::Gru => 3,
        _ => 1,
    };
    let w = if matches!(kind, CellKind::AbDrnn) {
        None
    } else {
        Some(
            Tensor::matrix(gate * hidden, hidden, r.array(gate * hidden * hidden)?)
                .map_err(|e| corrupt(e.to_string()))?,
        )
    };
    let u = Tensor::matrix(gate * hidden, input, r.array(gate * hidden * input)?)
        .map_err(|e| corrupt(e.to_string()))?;
    let b = Tensor::vector(r.array(gate * hidden)?).map_err(|e| corrupt(e.to_string()))?;
    let alpha_logit = if matches!(kind, CellKind::Drnn | CellKind::Sdrnn | CellKind::AbDrnn) {
        Some(Tensor::scalar(r.array(1)?[0]).map_err(|e| corrupt(e.to_string()))?)
    } else {
        None
    };
    let dale_signs = if matches!(kind, CellKind::Drnn) {
        let signs = r.array(hidden)?;
        if signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err(corrupt("dale signs must be +1 or -1"));
        }
        Some(signs)
    } else {
        None
    };
    Ok(CellParameters {
        kind,
        hidden_size: hidden,
        input_size: input,
        activation,
        alpha_mode,
        w,
        u,
        b,
        alpha_logit,
        dale_signs,
    })
}

/// Serialize a bare cell.
pub fn save_cell(p: &CellParameters, seed: u64) -> Vec<u8> {
    let mut w = Writer::new(&format!("payload=cell\n{}", cell_header_fields(p, seed)));
    write_cell_arrays(&mut w, p);
    w.buf
}

pub fn load_cell(bytes: &[u8]) -> Result<(CellParameters, u64)> {
    let (fields, mut r) = Reader::new(bytes)?;
    if get(&fields, "payload")? != "cell" {
        return Err(corrupt("payload is not a bare cell"));
    }
    let kind = CellKind::parse(get(&fields, "kind")?).ok_or_else(|| corrupt("bad kind"))?;
    let hidden = get_usize(&fields, "hidden")?;
    let input = get_usize(&fields, "input")?;
    let activation =
        Activation::parse(get(&fields, "activation")?).ok_or_else(|| corrupt("bad activation"))?;
    let alpha_mode =
        AlphaMode::parse(get(&fields, "alpha_mode")?).ok_or_else(|| corrupt("bad alpha_mode"))?;
    let seed = get(&fields, "seed")?
        .parse()
        .map_err(|_| corrupt("bad seed"))?;
    let p = read_cell_arrays(&mut r, kind, hidden, input, activation, alpha_mode)?;
    r.finish()?;
    Ok((p, seed))
}

/// Serialize a full model (embedding, recurrent layers, head).
pub fn save_model(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let header = format!(
        "payload=model\nkind={}\ntask={}\nlayers={}\nembedding_dim={}\nhidden_dim={}\nactivation={}\ndropout={}\nalpha_mode={}\nseed={}\nvocab={}\n",
        c.cell.name(),
        c.task.name(),
        c.num_layers,
        c.embedding_dim,
        c.hidden_dim,
        c.activation.name(),
        c.dropout_rate,
        c.alpha_mode.name(),
        model.seed,
        c.vocab.join(" "),
    );
    let mut w = Writer::new(&header);
    w.tensor(&model.embedding);
    for layer in &model.layers {
        write_cell_arrays(&mut w, layer);
    }
    w.tensor(&model.head_w);
    w.tensor(&model.head_b);
    w.buf
}

pub fn load_model(bytes: &[u8]) -> Result<Model> {
    let (fields, mut r) = Reader::new(bytes)?;
    if get(&fields, "payload")? != "model" {
        return Err(corrupt("payload is not a model"));
    }
    let cell = CellKind::parse(get(&fields, "kind")?).ok_or_else(|| corrupt("bad kind"))?;
    let task = Task::parse(get(&fields, "task")?).ok_or_else(|| corrupt("bad task"))?;
    let num_layers = get_usize(&fields, "layers")?;
    let embedding_dim = get_usize(&fields, "embedding_dim")?;
    let hidden_dim = get_usize(&fields, "hidden_dim")?;
    let activation =
        Activation::parse(get(&fields, "activation")?).ok_or_else(|| corrupt("bad activation"))?;
    let dropout_rate: f64 = get(&fields, "dropout")?
        .parse()
        .map_err(|_| corrupt("bad dropout"))?;
    let alpha_mode =
        AlphaMode::parse(get(&fields, "alpha_mode")?).ok_or_else(|| corrupt("bad alpha_mode"))?;
    let seed: u64 = get(&fields, "seed")?
        .parse()
        .map_err(|_| corrupt("bad seed"))?;
    let vocab: Vec<String> = {
        let v = get(&fields, "vocab")?;
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(' ').map(str::to_string).collect()
        }
    };

    let config = ModelConfig {
        cell,
        task,
        num_layers,
        embedding_dim,
        hidden_dim,
        activation,
        dropout_rate,
        vocab,
        alpha_mode,
        dale_placement: DalePlacement::Last,
    };
    let out_dim = config.output_dim();
    let embedding = Tensor::matrix(
        config.vocab.len(),
        embedding_dim,
        r.array(config.vocab.len() * embedding_dim)?,
    )
    .map_err(|e| corrupt(e.to_string()))?;
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let input = if l == 0 { embedding_dim } else { hidden_dim };
        layers.push(read_cell_arrays(
            &mut r, cell, hidden_dim, input, activation, alpha_mode,
        )?);
    }
    let head_w = Tensor::matrix(out_dim, hidden_dim, r.array(out_dim * hidden_dim)?)
        .map_err(|e| corrupt(e.to_string()))?;
    let head_b = Tensor::vector(r.array(out_dim)?).map_err(|e| corrupt(e.to_string()))?;
    r.finish()?;
    Ok(Model::from_parts(config, seed, embedding, layers, head_w, head_b))
}
