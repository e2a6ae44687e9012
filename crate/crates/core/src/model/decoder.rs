//! Autoregressive transformer decoder over the fused representation.
//!
//! Two pre-norm blocks (causal self-attention, cross-attention over the
//! fused frames, GELU feed-forward), learned token + position embeddings,
//! and an output projection initialized near zero so an untrained decoder
//! predicts a near-uniform distribution.
//!
//! Two forward routes share the same kernels and operation order:
//! a tape route for training and a plain route for decoding. Their outputs
//! are bitwise identical, which the tests pin down.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::numerics::{kernels, ParameterSet, Tape, Tensor, Var};
use crate::rng::{label_part, rng_for};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Output-projection init scale; small so initial logits are near zero.
    pub out_init_std: f64,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn with_vocab(vocab_size: usize, seed: u64) -> Self {
        DecoderConfig {
            width: 64,
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
            max_positions: 32,
            vocab_size,
            ln_eps: 1e-5,
            init_std: 0.02,
            out_init_std: 0.01,
            seed,
        }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

enum Init {
    Randn(f64),
    Ones,
    Zeros,
}

/// Decoder architecture handle; parameters live in a [`ParameterSet`]
/// under the `dec.` prefix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
}

/// Tape leaves of every decoder parameter, built once per tape so the whole
/// batch accumulates gradients on shared nodes.
#[derive(Debug)]
pub struct DecoderVars {
    map: BTreeMap<String, Var>,
}

impl DecoderVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Numerics(
                crate::numerics::NumericsError::UnknownParameter(name.to_string()),
            ))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        if config.width % config.heads != 0 {
            return Err(ModelError::BadEncoderConfig(format!(
                "decoder width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        if config.vocab_size < 2 || config.blocks == 0 || config.max_positions == 0 {
            return Err(ModelError::BadEncoderConfig(
                "decoder needs vocab ≥ 2, ≥ 1 block, ≥ 1 position".into(),
            ));
        }
        Ok(Decoder { config })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    fn parameter_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.config.width;
        let f = d * self.config.ffn_mult;
        let v = self.config.vocab_size;
        let std = self.config.init_std;
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("dec.tok_emb".into(), vec![v, d], Init::Randn(std)),
            (
                "dec.pos_emb".into(),
                vec![self.config.max_positions, d],
                Init::Randn(std),
            ),
        ];
        for b in 0..self.config.blocks {
            let p = |s: &str| format!("dec.b{b}.{s}");
            for ln in ["ln1", "ln2", "ln3"] {
                specs.push((p(&format!("{ln}.g")), vec![d], Init::Ones));
                specs.push((p(&format!("{ln}.b")), vec![d], Init::Zeros));
            }
            for attn in ["attn", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    specs.push((p(&format!("{attn}.{w}")), vec![d, d], Init::Randn(std)));
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    specs.push((p(&format!("{attn}.{bias}")), vec![d], Init::Zeros));
                }
            }
            specs.push((p("ffn.w1"), vec![d, f], Init::Randn(std)));
            specs.push((p("ffn.b1"), vec![f], Init::Zeros));
            specs.push((p("ffn.w2"), vec![f, d], Init::Randn(std)));
            specs.push((p("ffn.b2"), vec![d], Init::Zeros));
        }
        specs.push(("dec.lnf.g".into(), vec![d], Init::Ones));
        specs.push(("dec.lnf.b".into(), vec![d], Init::Zeros));
        specs.push((
            "dec.out.w".into(),
            vec![d, v],
            Init::Randn(self.config.out_init_std),
        ));
        specs.push(("dec.out.b".into(), vec![v], Init::Zeros));
        specs
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameter_specs().into_iter().map(|(n, _, _)| n).collect()
    }

    /// Create every decoder parameter; each tensor's values are a pure
    /// function of (seed, name), independent of creation order.
    pub fn init_params(&self, params: &mut ParameterSet) -> Result<()> {
        for (name, shape, init) in self.parameter_specs() {
            let tensor = match init {
                Init::Randn(std) => {
                    let mut rng = rng_for(self.config.seed, &[label_part(&name)]);
                    Tensor::randn(shape, std, &mut rng)
                }
                Init::Ones => Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?,
                Init::Zeros => Tensor::zeros(shape),
            };
            params.insert(&name, tensor)?;
        }
        Ok(())
    }

    /// Leaf every decoder parameter onto the tape.
    pub fn leaf_params(&self, tape: &mut Tape, params: &ParameterSet) -> Result<DecoderVars> {
        let mut map = BTreeMap::new();
        for name in self.parameter_names() {
            map.insert(name.clone(), tape.leaf(params.get(&name)?));
        }
        Ok(DecoderVars { map })
    }

    fn check_tokens(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.config.max_positions {
            return Err(ModelError::PositionOverflow {
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Full teacher-forced logits `[len, V]` on the tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        memory: Var,
        tokens: &[usize],
    ) -> Result<Var> {
        self.check_tokens(tokens.len())?;
        let cfg = &self.config;
        let (d, dh) = (cfg.width, cfg.head_width());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let l = tokens.len();

        let tok = tape.gather_rows(vars.get("dec.tok_emb")?, tokens)?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = tape.gather_rows(vars.get("dec.pos_emb")?, &positions)?;
        let mut x = tape.add(tok, pos)?;

        for b in 0..cfg.blocks {
            let p = |s: &str| format!("dec.b{b}.{s}");

            // Causal self-attention.
            let h = tape.layer_norm(x, vars.get(&p("ln1.g"))?, vars.get(&p("ln1.b"))?, cfg.ln_eps)?;
            let q = self.proj_tape(tape, vars, h, &p("attn.wq"), &p("attn.bq"))?;
            let k = self.proj_tape(tape, vars, h, &p("attn.wk"), &p("attn.bk"))?;
            let v = self.proj_tape(tape, vars, h, &p("attn.wv"), &p("attn.bv"))?;
            let mut ctx_heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax_rows(scaled, 1.0, true)?;
                ctx_heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&ctx_heads)?;
            let attn_out = self.proj_tape(tape, vars, ctx, &p("attn.wo"), &p("attn.bo"))?;
            x = tape.add(x, attn_out)?;

            // Cross-attention over the fused frames.
            let h2 =
                tape.layer_norm(x, vars.get(&p("ln2.g"))?, vars.get(&p("ln2.b"))?, cfg.ln_eps)?;
            let q2 = self.proj_tape(tape, vars, h2, &p("cross.wq"), &p("cross.bq"))?;
            let k2 = self.proj_tape(tape, vars, memory, &p("cross.wk"), &p("cross.bk"))?;
            let v2 = self.proj_tape(tape, vars, memory, &p("cross.wv"), &p("cross.bv"))?;
            let mut cross_heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q2, lo, hi)?;
                let kh = tape.slice_cols(k2, lo, hi)?;
                let vh = tape.slice_cols(v2, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax_rows(scaled, 1.0, false)?;
                cross_heads.push(tape.matmul(probs, vh)?);
            }
            let cross_ctx = tape.concat_cols(&cross_heads)?;
            let cross_out = self.proj_tape(tape, vars, cross_ctx, &p("cross.wo"), &p("cross.bo"))?;
            x = tape.add(x, cross_out)?;

            // Feed-forward.
            let h3 =
                tape.layer_norm(x, vars.get(&p("ln3.g"))?, vars.get(&p("ln3.b"))?, cfg.ln_eps)?;
            let inner = self.proj_tape(tape, vars, h3, &p("ffn.w1"), &p("ffn.b1"))?;
            let act = tape.gelu(inner);
            let ffn = self.proj_tape(tape, vars, act, &p("ffn.w2"), &p("ffn.b2"))?;
            x = tape.add(x, ffn)?;
        }
        let _ = d;

        let xf = tape.layer_norm(x, vars.get("dec.lnf.g")?, vars.get("dec.lnf.b")?, cfg.ln_eps)?;
        let logits = self.proj_tape(tape, vars, xf, "dec.out.w", "dec.out.b")?;
        Ok(logits)
    }

    fn proj_tape(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var> {
        let prod = tape.matmul(x, vars.get(w)?)?;
        Ok(tape.add_row(prod, vars.get(b)?)?)
    }

    /// Teacher-forced loss: input is `target[..n-1]`, labels are
    /// `target[1..]`; positions whose label equals `pad_id` are ignored.
    /// Returns (logits, scalar loss).
    pub fn teacher_forced_on_tape(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        memory: Var,
        target: &[usize],
        pad_id: usize,
    ) -> Result<(Var, Var)> {
        if target.len() < 2 {
            return Err(ModelError::TargetTooShort(target.len()));
        }
        let logits = self.forward_tape(tape, vars, memory, &target[..target.len() - 1])?;
        let loss = tape.cross_entropy(logits, &target[1..], Some(pad_id))?;
        Ok((logits, loss))
    }

    /// Gradient-free forward; bitwise identical to the tape route.
    /// `memory` is `[mem_rows, width]` flattened. Returns `[len, V]` logits.
    pub fn forward_eval(
        &self,
        params: &ParameterSet,
        memory: &[f64],
        mem_rows: usize,
        tokens: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_tokens(tokens.len())?;
        let cfg = &self.config;
        let (d, dh) = (cfg.width, cfg.head_width());
        if memory.len() != mem_rows * d {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::ShapeValueMismatch {
                    shape: vec![mem_rows, d],
                    len: memory.len(),
                },
            ));
        }
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let l = tokens.len();
        let t = |name: &str| params.get(name);

        let tok = gather(t("dec.tok_emb")?, tokens)?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = gather(t("dec.pos_emb")?, &positions)?;
        let mut x = addm(&tok, &pos);
        let mem = Mat {
            v: memory.to_vec(),
            r: mem_rows,
            c: d,
        };

        for b in 0..cfg.blocks {
            let p = |s: &str| format!("dec.b{b}.{s}");

            let h = ln(&x, t(&p("ln1.g"))?, t(&p("ln1.b"))?, cfg.ln_eps);
            let q = proj(&h, t(&p("attn.wq"))?, t(&p("attn.bq"))?);
            let k = proj(&h, t(&p("attn.wk"))?, t(&p("attn.bk"))?);
            let v = proj(&h, t(&p("attn.wv"))?, t(&p("attn.bv"))?);
            let mut ctx_heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = slice(&q, lo, hi);
                let kh = slice(&k, lo, hi);
                let vh = slice(&v, lo, hi);
                let kt = transpose(&kh);
                let scores = scalem(&mm(&qh, &kt), inv_sqrt);
                let probs = softmax(&scores, true);
                ctx_heads.push(mm(&probs, &vh));
            }
            let ctx = concat(&ctx_heads);
            let attn_out = proj(&ctx, t(&p("attn.wo"))?, t(&p("attn.bo"))?);
            x = addm(&x, &attn_out);

            let h2 = ln(&x, t(&p("ln2.g"))?, t(&p("ln2.b"))?, cfg.ln_eps);
            let q2 = proj(&h2, t(&p("cross.wq"))?, t(&p("cross.bq"))?);
            let k2 = proj(&mem, t(&p("cross.wk"))?, t(&p("cross.bk"))?);
            let v2 = proj(&mem, t(&p("cross.wv"))?, t(&p("cross.bv"))?);
            let mut cross_heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = slice(&q2, lo, hi);
                let kh = slice(&k2, lo, hi);
                let vh = slice(&v2, lo, hi);
                let kt = transpose(&kh);
                let scores = scalem(&mm(&qh, &kt), inv_sqrt);
                let probs = softmax(&scores, false);
                cross_heads.push(mm(&probs, &vh));
            }
            let cross_ctx = concat(&cross_heads);
            let cross_out = proj(&cross_ctx, t(&p("cross.wo"))?, t(&p("cross.bo"))?);
            x = addm(&x, &cross_out);

            let h3 = ln(&x, t(&p("ln3.g"))?, t(&p("ln3.b"))?, cfg.ln_eps);
            let inner = proj(&h3, t(&p("ffn.w1"))?, t(&p("ffn.b1"))?);
            let act = gelum(&inner);
            let ffn = proj(&act, t(&p("ffn.w2"))?, t(&p("ffn.b2"))?);
            x = addm(&x, &ffn);
        }

        let xf = ln(&x, t("dec.lnf.g")?, t("dec.lnf.b")?, cfg.ln_eps);
        let logits = proj(&xf, t("dec.out.w")?, t("dec.out.b")?);
        Ok(logits.v)
    }
}

// ---------------------------------------------------------------------
// Plain-matrix helpers for the eval route. Each mirrors a tape op exactly
// (same kernels, same loop order) so the two routes agree bitwise.
// ---------------------------------------------------------------------

#[derive(Clone)]
struct Mat {
    v: Vec<f64>,
    r: usize,
    c: usize,
}

fn gather(table: &Tensor, ids: &[usize]) -> Result<Mat> {
    let (rows, cols) = (table.rows(), table.cols());
    let mut v = Vec::with_capacity(ids.len() * cols);
    for &ix in ids {
        if ix >= rows {
            return Err(ModelError::TokenIdOutOfRange { id: ix, vocab: rows });
        }
        v.extend_from_slice(&table.values()[ix * cols..(ix + 1) * cols]);
    }
    Ok(Mat {
        v,
        r: ids.len(),
        c: cols,
    })
}

fn addm(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!((a.r, a.c), (b.r, b.c));
    Mat {
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        r: a.r,
        c: a.c,
    }
}

fn ln(a: &Mat, gain: &Tensor, bias: &Tensor, eps: f64) -> Mat {
    let mut out = vec![0.0; a.v.len()];
    kernels::layer_norm_rows(
        &a.v,
        a.r,
        a.c,
        eps,
        Some(gain.values()),
        Some(bias.values()),
        &mut out,
    );
    Mat {
        v: out,
        r: a.r,
        c: a.c,
    }
}

fn proj(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let n = w.cols();
    let mut out = vec![0.0; x.r * n];
    kernels::matmul(&x.v, w.values(), x.r, x.c, n, &mut out);
    kernels::add_row_inplace(&mut out, b.values(), x.r, n);
    Mat { v: out, r: x.r, c: n }
}

fn slice(a: &Mat, lo: usize, hi: usize) -> Mat {
    let width = hi - lo;
    let mut v = Vec::with_capacity(a.r * width);
    for r in 0..a.r {
        v.extend_from_slice(&a.v[r * a.c + lo..r * a.c + hi]);
    }
    Mat { v, r: a.r, c: width }
}

fn transpose(a: &Mat) -> Mat {
    let mut v = vec![0.0; a.r * a.c];
    for r in 0..a.r {
        for c in 0..a.c {
            v[c * a.r + r] = a.v[r * a.c + c];
        }
    }
    Mat { v, r: a.c, c: a.r }
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.c, b.r);
    let mut v = vec![0.0; a.r * b.c];
    kernels::matmul(&a.v, &b.v, a.r, a.c, b.c, &mut v);
    Mat { v, r: a.r, c: b.c }
}

fn scalem(a: &Mat, s: f64) -> Mat {
    Mat {
        v: a.v.iter().map(|x| x * s).collect(),
        r: a.r,
        c: a.c,
    }
}

fn softmax(a: &Mat, causal: bool) -> Mat {
    let mut v = vec![0.0; a.v.len()];
    kernels::softmax_rows(&a.v, a.r, a.c, 1.0, causal, &mut v);
    Mat { v, r: a.r, c: a.c }
}

fn concat(parts: &[Mat]) -> Mat {
    let rows = parts[0].r;
    let total: usize = parts.iter().map(|p| p.c).sum();
    let mut v = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            v.extend_from_slice(&p.v[r * p.c..(r + 1) * p.c]);
        }
    }
    Mat { v, r: rows, c: total }
}

fn gelum(a: &Mat) -> Mat {
    Mat {
        v: a.v.iter().map(|x| kernels::gelu(*x)).collect(),
        r: a.r,
        c: a.c,
    }
}
