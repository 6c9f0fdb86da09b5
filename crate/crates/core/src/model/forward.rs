use super::Model;
use crate::error::{Error, Result};
use crate::gradcore::{inverse_sigmoid, BoundParams, Tape, Tensor, Var, LAYERNORM_EPS};
use crate::preprocess::GrayImage;
use crate::querygen::{
    attention_group_mask, positional_query_tape, sinusoidal_pe, ContentRef, MlpVars,
    PositionalEncodingSpec, QueryGroup, QuerySet,
};

/// Added to blocked attention scores. Large enough that `exp` underflows
/// to exactly zero.
const MASKED: f64 = -1e9;

/// Patch matrix of one page: `[N, P*P]` with ink intensity `1 - v/255`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ImageInput {
    pub fn from_gray(img: &GrayImage, patch: usize) -> Result<Self> {
        if patch == 0 || img.width % patch != 0 || img.height % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch} does not divide the {}x{} image; pad it first",
                img.width, img.height
            )));
        }
        let (gh, gw) = (img.height / patch, img.width / patch);
        let mut data = Vec::with_capacity(img.width * img.height);
        for pr in 0..gh {
            for pc in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        let v = img.get(pc * patch + x, pr * patch + y);
                        data.push(1.0 - v as f64 / 255.0);
                    }
                }
            }
        }
        Ok(Self {
            tokens: Tensor::new(vec![gh * gw, patch * patch], data)?,
            grid_h: gh,
            grid_w: gw,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Fixed 2D sinusoid: the first half of each row encodes the patch row,
/// the second half the patch column, both at patch-center coordinates.
pub fn image_position_embedding(
    grid_h: usize,
    grid_w: usize,
    d_model: usize,
    temperature: f64,
) -> Result<Tensor> {
    if d_model % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_model {d_model} must be a multiple of 4"
        )));
    }
    let spec = PositionalEncodingSpec {
        dim_per_coordinate: d_model / 2,
        temperature,
    };
    let mut data = Vec::with_capacity(grid_h * grid_w * d_model);
    for r in 0..grid_h {
        let pe_y = sinusoidal_pe((r as f64 + 0.5) / grid_h as f64, &spec);
        for c in 0..grid_w {
            data.extend_from_slice(&pe_y);
            data.extend(sinusoidal_pe((c as f64 + 0.5) / grid_w as f64, &spec));
        }
    }
    Tensor::new(vec![grid_h * grid_w, d_model], data)
}

/// Read access to bound parameters by name.
pub(crate) struct Params<'a> {
    model: &'a Model,
    bound: &'a BoundParams,
}

impl<'a> Params<'a> {
    pub(crate) fn new(model: &'a Model, bound: &'a BoundParams) -> Self {
        Self { model, bound }
    }

    fn var(&self, name: &str) -> Var {
        let id = self
            .model
            .params
            .id(name)
            .unwrap_or_else(|| panic!("model parameter {name} missing"));
        self.bound.var(id)
    }

    fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.var(&format!("{prefix}.w")))?;
        tape.add_row(h, self.var(&format!("{prefix}.b")))
    }

    fn ffn(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{prefix}.1"), x)?;
        let h = tape.relu(h);
        self.linear(tape, &format!("{prefix}.2"), h)
    }

    fn mlp(&self, prefix: &str) -> MlpVars {
        MlpVars {
            w1: self.var(&format!("{prefix}.1.w")),
            b1: self.var(&format!("{prefix}.1.b")),
            w2: self.var(&format!("{prefix}.2.w")),
            b2: self.var(&format!("{prefix}.2.b")),
        }
    }
}

/// `Z0 = tokens W + b + M_PE`.
pub fn patchify(tape: &mut Tape, tokens: Var, w: Var, b: Var, position: Var) -> Result<Var> {
    let z = tape.matmul(tokens, w)?;
    let z = tape.add_row(z, b)?;
    tape.add(z, position)
}

/// Multi-head scaled dot-product attention with an optional additive mask.
fn attention(
    tape: &mut Tape,
    p: &Params,
    prefix: &str,
    heads: usize,
    qk_in: (Var, Var),
    v_in: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let q = p.linear(tape, &format!("{prefix}.q"), qk_in.0)?;
    let k = p.linear(tape, &format!("{prefix}.k"), qk_in.1)?;
    let v = p.linear(tape, &format!("{prefix}.v"), v_in)?;
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale);
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    p.linear(tape, &format!("{prefix}.o"), cat)
}

fn residual_norm(tape: &mut Tape, x: Var, update: Var) -> Result<Var> {
    let s = tape.add(x, update)?;
    Ok(tape.layernorm(s, LAYERNORM_EPS))
}

/// Post-norm encoder stack over a `[N, d]` token sequence.
pub(crate) fn encoder_layers(tape: &mut Tape, p: &Params, z0: Var) -> Result<Var> {
    let cfg = &p.model.cfg;
    let mut x = z0;
    for l in 0..cfg.enc_layers {
        let a = attention(
            tape,
            p,
            &format!("enc.{l}.attn"),
            cfg.heads,
            (x, x),
            x,
            None,
        )?;
        x = residual_norm(tape, x, a)?;
        let f = p.ffn(tape, &format!("enc.{l}.ffn"), x)?;
        x = residual_norm(tape, x, f)?;
    }
    Ok(x)
}

/// One feature map, row-major `[h * w, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLevel {
    pub map: Var,
    pub h: usize,
    pub w: usize,
}

/// Averages `2^level x 2^level` cells of a `grid_h x grid_w` map.
fn pooling_matrix(grid_h: usize, grid_w: usize, level: usize) -> (Tensor, usize, usize) {
    let s = 1usize << level;
    let (h, w) = (grid_h.div_ceil(s), grid_w.div_ceil(s));
    let n0 = grid_h * grid_w;
    let mut data = vec![0.0; h * w * n0];
    for r in 0..h {
        for c in 0..w {
            let rows = r * s..((r + 1) * s).min(grid_h);
            let cols = c * s..((c + 1) * s).min(grid_w);
            let count = (rows.len() * cols.len()) as f64;
            for rr in rows {
                for cc in cols.clone() {
                    data[(r * w + c) * n0 + rr * grid_w + cc] = 1.0 / count;
                }
            }
        }
    }
    (
        Tensor::new(vec![h * w, n0], data).expect("pool shape"),
        h,
        w,
    )
}

/// Encoder output as `levels` maps; level `l` average-pools the finest
/// map by `2^l`.
pub fn encode(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    z0: Var,
    grid: (usize, usize),
) -> Result<Vec<FeatureLevel>> {
    let p = Params::new(model, bound);
    let x = encoder_layers(tape, &p, z0)?;
    let mut levels = vec![FeatureLevel {
        map: x,
        h: grid.0,
        w: grid.1,
    }];
    for l in 1..model.cfg.levels {
        let (pool, h, w) = pooling_matrix(grid.0, grid.1, l);
        let pool = tape.constant(pool);
        levels.push(FeatureLevel {
            map: tape.matmul(pool, x)?,
            h,
            w,
        });
    }
    Ok(levels)
}

/// Weights of one deformable cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct DeformableParams {
    pub offset_w: Var,
    pub offset_b: Var,
    pub weight_w: Var,
    pub weight_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableParams {
    fn bind(p: &Params, prefix: &str) -> Self {
        let cfg = &p.model.cfg;
        let v = |s: &str| p.var(&format!("{prefix}.{s}"));
        Self {
            offset_w: v("offset.w"),
            offset_b: v("offset.b"),
            weight_w: v("weight.w"),
            weight_b: v("weight.b"),
            value_w: v("value.w"),
            value_b: v("value.b"),
            out_w: v("out.w"),
            out_b: v("out.b"),
            heads: cfg.heads,
            levels: cfg.levels,
            points: cfg.sample_points,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeformableOutput {
    /// `[Q, d]`.
    pub output: Var,
    /// Softmax weights, `[heads * Q, levels * points]`, head-major.
    pub weights: Var,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Sparse cross-attention: each query reads `points` bilinear samples per
/// head and level around its reference box center. Offsets are in units of
/// half the reference width and height.
pub fn deformable_attention(
    tape: &mut Tape,
    query_embed: Var,
    reference: Var,
    features: &[FeatureLevel],
    p: &DeformableParams,
) -> Result<DeformableOutput> {
    let (hn, ln, kn) = (p.heads, p.levels, p.points);
    if features.len() != ln {
        return Err(Error::shape(
            "deformable_attention",
            format!(
                "{} feature levels for {ln} configured levels",
                features.len()
            ),
        ));
    }
    let q = tape.shape(query_embed)[0];
    if tape.shape(reference) != [q, 4] {
        return Err(Error::shape(
            "deformable_attention",
            format!("reference {:?} for {q} queries", tape.shape(reference)),
        ));
    }
    let off = affine(tape, query_embed, p.offset_w, p.offset_b)?;
    let logits = affine(tape, query_embed, p.weight_w, p.weight_b)?;
    let cx = tape.gather_cols(reference, &vec![0; kn])?;
    let cy = tape.gather_cols(reference, &vec![1; kn])?;
    let w = tape.gather_cols(reference, &vec![2; kn])?;
    let hw = tape.scale(w, 0.5);
    let h = tape.gather_cols(reference, &vec![3; kn])?;
    let hh = tape.scale(h, 0.5);

    let mut maps: Vec<Vec<Var>> = Vec::with_capacity(ln);
    let mut dh = 0;
    for f in features {
        let v = affine(tape, f.map, p.value_w, p.value_b)?;
        let d = tape.shape(v)[1];
        dh = d / hn;
        let mut per_head = Vec::with_capacity(hn);
        for head in 0..hn {
            let s = tape.slice_cols(v, head * dh, dh)?;
            per_head.push(tape.reshape(s, &[f.h, f.w, dh])?);
        }
        maps.push(per_head);
    }

    // Samples come out level-major; reorder so each query's L*K samples
    // are contiguous.
    let order: Vec<usize> = (0..q)
        .flat_map(|qi| (0..ln).flat_map(move |l| (0..kn).map(move |k| l * q * kn + qi * kn + k)))
        .collect();
    let mut head_outs = Vec::with_capacity(hn);
    let mut weights = Vec::with_capacity(hn);
    for head in 0..hn {
        let mut samples = Vec::with_capacity(ln);
        for (l, level_maps) in maps.iter().enumerate() {
            let base = (head * ln + l) * kn;
            let ox = tape.gather_cols(off, &(0..kn).map(|k| (base + k) * 2).collect::<Vec<_>>())?;
            let oy = tape.gather_cols(
                off,
                &(0..kn).map(|k| (base + k) * 2 + 1).collect::<Vec<_>>(),
            )?;
            let dx = tape.mul(ox, hw)?;
            let dy = tape.mul(oy, hh)?;
            let x = tape.add(cx, dx)?;
            let y = tape.add(cy, dy)?;
            samples.push(tape.bilinear_sample(level_maps[head], x, y)?);
        }
        let all = tape.concat_rows(&samples)?;
        let values = tape.gather_rows(all, &order)?;
        let wl = tape.slice_cols(logits, head * ln * kn, ln * kn)?;
        let a = tape.softmax(wl);
        head_outs.push(tape.group_weighted_sum(a, values)?);
        weights.push(a);
    }
    debug_assert!(dh > 0);
    let cat = tape.concat_cols(&head_outs)?;
    let output = affine(tape, cat, p.out_w, p.out_b)?;
    let weights = tape.concat_rows(&weights)?;
    Ok(DeformableOutput { output, weights })
}

/// Outputs of one decoder layer for every query of the set.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `[Q, C + 1]`.
    pub logits: Var,
    /// Refined anchors, `[Q, 4]`; these are the predicted boxes.
    pub boxes: Var,
    pub content: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Anchors fed to the first layer.
    pub initial_anchors: Var,
    pub layers: Vec<LayerOutput>,
    pub features: Vec<FeatureLevel>,
}

/// Logit-space anchors of the matching queries, `[n, 4]`.
fn matching_anchor_logits(tape: &mut Tape, model: &Model, p: &Params) -> Result<Var> {
    use crate::querygen::QueryVariant::*;
    match model.cfg.variant {
        GridPoints => {
            let z: Vec<f64> = model
                .matching_anchors()
                .iter()
                .flat_map(|b| b.to_array().map(inverse_sigmoid))
                .collect();
            Ok(tape.constant(Tensor::new(vec![model.cfg.num_queries, 4], z)?))
        }
        LearnedPoints => {
            let wh = inverse_sigmoid(crate::querygen::POINT_EXTENT);
            let c = tape.constant(Tensor::new(
                vec![model.cfg.num_queries, 2],
                vec![wh; 2 * model.cfg.num_queries],
            )?);
            tape.concat_cols(&[p.var("query.point"), c])
        }
        _ => Ok(p.var("query.anchor")),
    }
}

/// Full forward pass of one page for the queries of `qs`.
///
/// Matching queries must come first and there must be exactly
/// `num_queries` of them; their anchors are the model's own, not the ones
/// stored in `qs`.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    input: &ImageInput,
    qs: &QuerySet,
) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    qs.validate()?;
    let n = cfg.num_queries;
    if qs.num_matching() != n || qs.group_of[..n].iter().any(|g| *g != QueryGroup::Matching) {
        return Err(Error::InvalidArgument(format!(
            "query set must start with exactly {n} matching queries, has {}",
            qs.num_matching()
        )));
    }
    let expected_tokens = [input.num_tokens(), cfg.patch * cfg.patch];
    if input.tokens.shape() != expected_tokens {
        return Err(Error::shape(
            "patchify",
            format!(
                "tokens {:?}, model expects {expected_tokens:?}",
                input.tokens.shape()
            ),
        ));
    }
    let p = Params::new(model, bound);

    let tokens = tape.constant(input.tokens.clone());
    let mpe = tape.constant(image_position_embedding(
        input.grid_h,
        input.grid_w,
        cfg.d_model,
        cfg.pe.temperature,
    )?);
    let z0 = patchify(tape, tokens, p.var("patch.w"), p.var("patch.b"), mpe)?;
    let features = encode(tape, model, bound, z0, (input.grid_h, input.grid_w))?;

    let mut rows = Vec::with_capacity(qs.len());
    for c in &qs.content {
        rows.push(match *c {
            ContentRef::Learned(i) if i < n => i,
            ContentRef::Label(k) if k < cfg.num_classes => n + k,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "query content {other:?} out of range"
                )))
            }
        });
    }
    let table = tape.concat_rows(&[p.var("query.content"), p.var("query.label")])?;
    let mut content = tape.gather_rows(table, &rows)?;

    let mut z = matching_anchor_logits(tape, model, &p)?;
    let mask = if qs.len() > n {
        let dn: Vec<f64> = qs.anchors[n..]
            .iter()
            .flat_map(|b| b.to_array().map(inverse_sigmoid))
            .collect();
        let dn = tape.constant(Tensor::new(vec![qs.len() - n, 4], dn)?);
        z = tape.concat_rows(&[z, dn])?;
        Some(tape.constant(attention_group_mask(qs).additive(MASKED)))
    } else {
        None
    };
    let initial_anchors = tape.sigmoid(z);
    let mut anchors = initial_anchors;

    let pos_mlp = p.mlp("query.pos");
    let mut layers = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let pos = positional_query_tape(tape, anchors, &pos_mlp, &cfg.pe)?;
        let qk = tape.add(content, pos)?;
        let sa = attention(
            tape,
            &p,
            &format!("dec.{l}.self"),
            cfg.heads,
            (qk, qk),
            content,
            mask,
        )?;
        content = residual_norm(tape, content, sa)?;
        let qe = tape.add(content, pos)?;
        let da = DeformableParams::bind(&p, &format!("dec.{l}.cross"));
        let ca = deformable_attention(tape, qe, anchors, &features, &da)?;
        content = residual_norm(tape, content, ca.output)?;
        let f = p.ffn(tape, &format!("dec.{l}.ffn"), content)?;
        content = residual_norm(tape, content, f)?;
        let delta = p.ffn(tape, &format!("dec.{l}.box"), content)?;
        z = tape.add(z, delta)?;
        anchors = tape.sigmoid(z);
        let logits = p.linear(tape, "head.class", content)?;
        layers.push(LayerOutput {
            logits,
            boxes: anchors,
            content,
        });
    }
    Ok(ForwardOutput {
        initial_anchors,
        layers,
        features,
    })
}
