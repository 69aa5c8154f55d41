//! Input featurisation and the stack of dense co-attention layers.
//!
//! Features are stored column-wise: a sentence state is `d x N` (one column
//! per word) and an image state is `d x T` (one column per region).

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig};
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Token ids of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceInput {
    pub token_ids: Vec<usize>,
}

/// Region features (`T x d_in`, one row per region) and region boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub region_features: Tensor,
    pub region_boxes: Vec<BBox>,
}

impl ImageInput {
    pub fn num_regions(&self) -> usize {
        self.region_boxes.len()
    }
}

/// One direction of one recurrent layer.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    /// Input weights, `4h x d_in`, gate order input/forget/cell/output.
    pub w_ih: ParamId,
    /// Recurrent weights, `4h x h`.
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

/// Parameters of one dense co-attention layer.
#[derive(Clone, Debug)]
pub struct DenseCoattnParams {
    /// `d x 2d`, applied to `[s; i_hat]`.
    pub w_s: ParamId,
    pub b_s: ParamId,
    /// `d x 2d`, applied to `[i; s_hat]`.
    pub w_i: ParamId,
    pub b_i: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub lstm: Vec<LstmLayer>,
    pub region_w: ParamId,
    pub region_b: ParamId,
    pub layers: Vec<DenseCoattnParams>,
}

pub const LSTM_LAYERS: usize = 2;

impl EncoderParams {
    pub fn register<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let h = d / 2;
        // Embeddings use the same Glorot bound as the other matrices.
        let embedding = store.add(
            "enc.embedding",
            glorot_uniform(config.vocab_size, config.embed_dim, rng),
        );
        let mut lstm = Vec::with_capacity(LSTM_LAYERS);
        for layer in 0..LSTM_LAYERS {
            let input = if layer == 0 { config.embed_dim } else { d };
            let mut direction = |name: &str, rng: &mut R| LstmDirection {
                w_ih: store.add(
                    format!("enc.lstm.{layer}.{name}.w_ih"),
                    glorot_uniform(4 * h, input, rng),
                ),
                w_hh: store.add(
                    format!("enc.lstm.{layer}.{name}.w_hh"),
                    glorot_uniform(4 * h, h, rng),
                ),
                bias: store.add(
                    format!("enc.lstm.{layer}.{name}.bias"),
                    Tensor::zeros(&[4 * h]),
                ),
            };
            let forward = direction("fwd", rng);
            let backward = direction("bwd", rng);
            lstm.push(LstmLayer { forward, backward });
        }
        let region_w = store.add(
            "enc.region.w",
            glorot_uniform(d, config.region_dim, rng),
        );
        let region_b = store.add("enc.region.b", Tensor::zeros(&[d]));
        let layers = (1..=config.depth)
            .map(|l| DenseCoattnParams {
                w_s: store.add(format!("enc.dcl.{l}.w_s"), glorot_uniform(d, 2 * d, rng)),
                b_s: store.add(format!("enc.dcl.{l}.b_s"), Tensor::zeros(&[d])),
                w_i: store.add(format!("enc.dcl.{l}.w_i"), glorot_uniform(d, 2 * d, rng)),
                b_i: store.add(format!("enc.dcl.{l}.b_i"), Tensor::zeros(&[d])),
            })
            .collect();
        Self {
            embedding,
            lstm,
            region_w,
            region_b,
            layers,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Sentence and image features at one encoder depth.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    /// `d x N`
    pub s: Var,
    /// `d x T`
    pub i: Var,
    pub depth: usize,
}

/// Output of one co-attention step.
#[derive(Clone, Copy, Debug)]
pub struct Coattention {
    /// Attended sentence feature per region, `d x T`.
    pub s_hat: Var,
    /// Attended image feature per word, `d x N`.
    pub i_hat: Var,
    /// Affinity `S^T I / sqrt(d)`, `N x T`.
    pub affinity: Var,
    /// Softmax of the affinity over regions (rows sum to one), `N x T`.
    pub word_to_region: Var,
    /// Softmax of the affinity over words (columns sum to one), `N x T`.
    pub region_to_word: Var,
}

/// All states produced by [`encode`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub initial: LayerState,
    /// States for depths `1..=len`.
    pub layers: Vec<LayerState>,
    pub attention: Vec<Coattention>,
}

impl EncoderOutput {
    /// State at depth `l` (1-based).
    pub fn tap(&self, l: usize) -> Result<LayerState> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::TapOutOfRange {
                tap: l,
                depth: self.layers.len(),
            });
        }
        Ok(self.layers[l - 1])
    }
}

fn lstm_direction(
    fwd: &mut Forward<'_>,
    params: &LstmDirection,
    input: Var,
    reverse: bool,
) -> Result<Var> {
    let w_ih = fwd.p(params.w_ih);
    let w_hh = fwd.p(params.w_hh);
    let bias = fwd.p(params.bias);
    let n = fwd.tape.value(input).shape()[1];
    let h = fwd.tape.value(w_hh).shape()[1];

    // Input projections for every position at once: 4h x N.
    let projected = fwd.tape.matmul(w_ih, input)?;
    let projected = fwd.tape.add_bias(projected, bias)?;

    let mut hidden = fwd.tape.constant(Tensor::zeros(&[h, 1]));
    let mut cell = fwd.tape.constant(Tensor::zeros(&[h, 1]));
    let mut outputs = vec![hidden; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let x_t = fwd.tape.slice(projected, 1, t, 1)?;
        let rec = fwd.tape.matmul(w_hh, hidden)?;
        let z = fwd.tape.add(x_t, rec)?;
        let zi = fwd.tape.slice(z, 0, 0, h)?;
        let zf = fwd.tape.slice(z, 0, h, h)?;
        let zg = fwd.tape.slice(z, 0, 2 * h, h)?;
        let zo = fwd.tape.slice(z, 0, 3 * h, h)?;
        let gi = fwd.tape.sigmoid(zi);
        let gf = fwd.tape.sigmoid(zf);
        let gg = fwd.tape.tanh(zg);
        let go = fwd.tape.sigmoid(zo);
        let keep = fwd.tape.mul(gf, cell)?;
        let write = fwd.tape.mul(gi, gg)?;
        cell = fwd.tape.add(keep, write)?;
        let squashed = fwd.tape.tanh(cell);
        hidden = fwd.tape.mul(go, squashed)?;
        outputs[t] = hidden;
    }
    hstack(fwd.tape, &outputs)
}

/// Concatenates column blocks left to right.
pub(crate) fn hstack(tape: &mut Tape, cols: &[Var]) -> Result<Var> {
    let (first, rest) = cols
        .split_first()
        .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
    let mut acc = *first;
    for &c in rest {
        acc = tape.concat(acc, c, 1)?;
    }
    Ok(acc)
}

/// Word features from a two-layer bidirectional LSTM over learned
/// embeddings. Column `n` is `[forward_n; backward_n]` from the second
/// layer, `d x N` overall.
pub fn encode_sentence(
    fwd: &mut Forward<'_>,
    params: &EncoderParams,
    sentence: &SentenceInput,
) -> Result<Var> {
    if sentence.token_ids.is_empty() {
        return Err(Error::InvalidInput("empty sentence".into()));
    }
    let table = fwd.p(params.embedding);
    let mut x = fwd.tape.embed(table, &sentence.token_ids)?;
    for layer in &params.lstm {
        let f = lstm_direction(fwd, &layer.forward, x, false)?;
        let b = lstm_direction(fwd, &layer.backward, x, true)?;
        let both = fwd.tape.concat(f, b, 0)?;
        x = fwd.dropout_rnn(both)?;
    }
    Ok(x)
}

/// Affine lift of each region feature to `d` dimensions, `d x T`.
pub fn encode_regions(
    fwd: &mut Forward<'_>,
    params: &EncoderParams,
    image: &ImageInput,
) -> Result<Var> {
    let feats = &image.region_features;
    let (t, d_in) = feats.dims2("encode_regions")?;
    if t == 0 || t != image.region_boxes.len() {
        return Err(Error::InvalidInput(format!(
            "{t} region features for {} boxes",
            image.region_boxes.len()
        )));
    }
    let w = fwd.p(params.region_w);
    let expected = fwd.tape.value(w).shape()[1];
    if d_in != expected {
        return Err(Error::Shape {
            op: "encode_regions",
            lhs: vec![t, d_in],
            rhs: fwd.tape.value(w).shape().to_vec(),
        });
    }
    let b = fwd.p(params.region_b);
    let cols = fwd.tape.constant(feats.transpose()?);
    fwd.tape.affine(cols, w, b)
}

/// Symmetric multiplicative co-attention between words and regions.
pub fn coattend(tape: &mut Tape, s: Var, i: Var) -> Result<Coattention> {
    let (ds, _) = tape.value(s).dims2("coattend")?;
    let (di, _) = tape.value(i).dims2("coattend")?;
    if ds != di {
        return Err(Error::Shape {
            op: "coattend",
            lhs: tape.value(s).shape().to_vec(),
            rhs: tape.value(i).shape().to_vec(),
        });
    }
    let st = tape.transpose(s)?;
    let raw = tape.matmul(st, i)?;
    let affinity = tape.scale(raw, 1.0 / (ds as f64).sqrt());
    let word_to_region = tape.softmax(affinity, 1)?;
    let region_to_word = tape.softmax(affinity, 0)?;
    let wr_t = tape.transpose(word_to_region)?;
    let i_hat = tape.matmul(i, wr_t)?;
    let s_hat = tape.matmul(s, region_to_word)?;
    Ok(Coattention {
        s_hat,
        i_hat,
        affinity,
        word_to_region,
        region_to_word,
    })
}

/// Concatenate, transform, rectify, then add the residual.
pub fn fuse_layer(
    fwd: &mut Forward<'_>,
    prev: LayerState,
    attended: &Coattention,
    params: &DenseCoattnParams,
) -> Result<LayerState> {
    let fuse = |fwd: &mut Forward<'_>, own: Var, other: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let w = fwd.p(w);
        let b = fwd.p(b);
        let x = fwd.tape.concat(own, other, 0)?;
        let z = fwd.tape.affine(x, w, b)?;
        let a = fwd.tape.relu(z);
        let a = fwd.dropout_fc(a)?;
        fwd.tape.add(a, own)
    };
    let s = fuse(fwd, prev.s, attended.i_hat, params.w_s, params.b_s)?;
    let i = fuse(fwd, prev.i, attended.s_hat, params.w_i, params.b_i)?;
    Ok(LayerState {
        s,
        i,
        depth: prev.depth + 1,
    })
}

/// Runs the co-attention stack from `(S_0, I_0)` up to `depth`.
pub fn encode_from(
    fwd: &mut Forward<'_>,
    params: &EncoderParams,
    initial: LayerState,
    depth: usize,
) -> Result<EncoderOutput> {
    if depth == 0 || depth > params.depth() {
        return Err(Error::TapOutOfRange {
            tap: depth,
            depth: params.depth(),
        });
    }
    let mut layers = Vec::with_capacity(depth);
    let mut attention = Vec::with_capacity(depth);
    let mut state = initial;
    for layer in &params.layers[..depth] {
        let att = coattend(fwd.tape, state.s, state.i)?;
        state = fuse_layer(fwd, state, &att, layer)?;
        layers.push(state);
        attention.push(att);
    }
    Ok(EncoderOutput {
        initial,
        layers,
        attention,
    })
}

/// Featurises both inputs and encodes them to `depth`.
pub fn encode(
    fwd: &mut Forward<'_>,
    params: &EncoderParams,
    sentence: &SentenceInput,
    image: &ImageInput,
    depth: usize,
) -> Result<EncoderOutput> {
    let s = encode_sentence(fwd, params, sentence)?;
    let i = encode_regions(fwd, params, image)?;
    encode_from(fwd, params, LayerState { s, i, depth: 0 }, depth)
}
