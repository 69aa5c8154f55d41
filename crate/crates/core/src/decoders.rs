//! Task-specific decoders reading a tapped encoder state.
//!
//! * retrieval: two summary networks pool regions and words into vectors,
//!   a bilinear form scores the pair;
//! * question answering: the same pooling followed by a two-layer answer
//!   head with one logistic unit per predefined answer;
//! * grounding: phrases are average-pooled word spans, scored against each
//!   region with a bilinear form.
//!
//! Decoders return logits; probabilities are their logistic transform.

use rand::Rng;

use crate::encoder::{EncoderOutput, LayerState};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig};
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer map `d -> d -> K` with a rectified hidden layer.
#[derive(Clone, Debug)]
pub struct SummaryNetworkParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SummaryNetworkParams {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), glorot_uniform(d, d, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d])),
            w2: store.add(format!("{prefix}.w2"), glorot_uniform(k, d, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[k])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcrDecoderParams {
    pub image_summary: SummaryNetworkParams,
    pub sentence_summary: SummaryNetworkParams,
    /// Bilinear scorer, `d x d`.
    pub bilinear: ParamId,
}

impl IcrDecoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut R) -> Self {
        let (d, k) = (config.dim, config.attention_maps);
        Self {
            image_summary: SummaryNetworkParams::register(store, &format!("{prefix}.image_summary"), d, k, rng),
            sentence_summary: SummaryNetworkParams::register(store, &format!("{prefix}.sentence_summary"), d, k, rng),
            bilinear: store.add(format!("{prefix}.bilinear"), glorot_uniform(d, d, rng)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VqaDecoderParams {
    pub image_summary: SummaryNetworkParams,
    pub sentence_summary: SummaryNetworkParams,
    /// `d x 2d`
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    /// `answers x d`
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl VqaDecoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut R) -> Self {
        let (d, k, a) = (config.dim, config.attention_maps, config.num_answers);
        Self {
            image_summary: SummaryNetworkParams::register(store, &format!("{prefix}.image_summary"), d, k, rng),
            sentence_summary: SummaryNetworkParams::register(store, &format!("{prefix}.sentence_summary"), d, k, rng),
            hidden_w: store.add(format!("{prefix}.head.w1"), glorot_uniform(d, 2 * d, rng)),
            hidden_b: store.add(format!("{prefix}.head.b1"), Tensor::zeros(&[d])),
            out_w: store.add(format!("{prefix}.head.w2"), glorot_uniform(a, d, rng)),
            out_b: store.add(format!("{prefix}.head.b2"), Tensor::zeros(&[a])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VgDecoderParams {
    /// Bilinear scorer, `d x d`.
    pub bilinear: ParamId,
}

impl VgDecoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.dim;
        Self {
            bilinear: store.add(format!("{prefix}.bilinear"), glorot_uniform(d, d, rng)),
        }
    }
}

/// Phrase boundaries, 1-based and inclusive: `1 <= begin <= end <= N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Self {
        Self { begin, end }
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if self.begin < 1 || self.begin > self.end || self.end > len {
            return Err(Error::SpanOutOfRange {
                begin: self.begin,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

/// Per-column attention scores `C = W2 relu(W1 F + b1) + b2`, `K x M`.
pub fn summary_scores(fwd: &mut Forward<'_>, features: Var, params: &SummaryNetworkParams) -> Result<Var> {
    let w1 = fwd.p(params.w1);
    let b1 = fwd.p(params.b1);
    let w2 = fwd.p(params.w2);
    let b2 = fwd.p(params.b2);
    let hidden = fwd.tape.affine(features, w1, b1)?;
    let hidden = fwd.tape.relu(hidden);
    let hidden = fwd.dropout_fc(hidden)?;
    fwd.tape.affine(hidden, w2, b2)
}

/// Softmax of each of the `K` rows over the `M` columns, averaged over
/// rows. Returned as an `M x 1` column summing to one.
pub fn attention_average(tape: &mut Tape, scores: Var) -> Result<Var> {
    let maps = tape.softmax(scores, 1)?;
    let avg = tape.mean_axis(maps, 0)?;
    tape.transpose(avg)
}

/// Attention-weighted sum of feature columns, `d x 1`.
pub fn summarize(tape: &mut Tape, features: Var, alpha: Var) -> Result<Var> {
    let (_, m) = tape.value(features).dims2("summarize")?;
    if tape.value(alpha).len() != m {
        return Err(Error::Shape {
            op: "summarize",
            lhs: tape.value(features).shape().to_vec(),
            rhs: tape.value(alpha).shape().to_vec(),
        });
    }
    let alpha = tape.reshape(alpha, &[m, 1])?;
    tape.matmul(features, alpha)
}

/// Bilinear logit `u^T W v` for columns `u` (`d x P`) and `v` (`d x Q`),
/// giving `P x Q`.
pub fn bilinear_logits(tape: &mut Tape, u: Var, w: Var, v: Var) -> Result<Var> {
    let ut = tape.transpose(u)?;
    let wv = tape.matmul(w, v)?;
    tape.matmul(ut, wv)
}

/// Summary vector and attention map for one modality.
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    pub vector: Var,
    pub attention: Var,
}

pub fn summarize_with(fwd: &mut Forward<'_>, features: Var, params: &SummaryNetworkParams) -> Result<Summary> {
    let scores = summary_scores(fwd, features, params)?;
    let attention = attention_average(fwd.tape, scores)?;
    let vector = summarize(fwd.tape, features, attention)?;
    Ok(Summary { vector, attention })
}

/// Retrieval decoder output. `logit` is `1 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct IcrOutput {
    pub logit: Var,
    pub image: Summary,
    pub sentence: Summary,
}

/// Question-answering decoder output. `logits` is `answers x 1`.
#[derive(Clone, Copy, Debug)]
pub struct VqaOutput {
    pub logits: Var,
    pub image: Summary,
    pub sentence: Summary,
}

pub fn icr_head(fwd: &mut Forward<'_>, state: LayerState, params: &IcrDecoderParams) -> Result<IcrOutput> {
    let image = summarize_with(fwd, state.i, &params.image_summary)?;
    let sentence = summarize_with(fwd, state.s, &params.sentence_summary)?;
    let w = fwd.p(params.bilinear);
    let logit = bilinear_logits(fwd.tape, image.vector, w, sentence.vector)?;
    Ok(IcrOutput { logit, image, sentence })
}

pub fn vqa_head(fwd: &mut Forward<'_>, state: LayerState, params: &VqaDecoderParams) -> Result<VqaOutput> {
    let image = summarize_with(fwd, state.i, &params.image_summary)?;
    let sentence = summarize_with(fwd, state.s, &params.sentence_summary)?;
    let joint = fwd.tape.concat(image.vector, sentence.vector, 0)?;
    let w1 = fwd.p(params.hidden_w);
    let b1 = fwd.p(params.hidden_b);
    let w2 = fwd.p(params.out_w);
    let b2 = fwd.p(params.out_b);
    let hidden = fwd.tape.affine(joint, w1, b1)?;
    let hidden = fwd.tape.relu(hidden);
    let hidden = fwd.dropout_fc(hidden)?;
    let logits = fwd.tape.affine(hidden, w2, b2)?;
    Ok(VqaOutput { logits, image, sentence })
}

/// Average-pools word columns per span, `d x H`.
pub fn phrase_pool(tape: &mut Tape, words: Var, spans: &[Span]) -> Result<Var> {
    let (_, n) = tape.value(words).dims2("phrase_pool")?;
    if spans.is_empty() {
        return Err(Error::InvalidInput("no phrases".into()));
    }
    let h = spans.len();
    let mut pool = vec![0.0; n * h];
    for (col, span) in spans.iter().enumerate() {
        span.check(n)?;
        let w = 1.0 / (span.end - span.begin + 1) as f64;
        for row in span.begin - 1..span.end {
            pool[row * h + col] = w;
        }
    }
    let pool = tape.constant(Tensor::new(vec![n, h], pool)?);
    tape.matmul(words, pool)
}

/// Phrase-region logits, `H x T`.
pub fn vg_head(fwd: &mut Forward<'_>, state: LayerState, spans: &[Span], params: &VgDecoderParams) -> Result<Var> {
    let phrases = phrase_pool(fwd.tape, state.s, spans)?;
    let w = fwd.p(params.bilinear);
    bilinear_logits(fwd.tape, phrases, w, state.i)
}

pub fn decode_icr(fwd: &mut Forward<'_>, states: &EncoderOutput, tap: usize, params: &IcrDecoderParams) -> Result<IcrOutput> {
    icr_head(fwd, states.tap(tap)?, params)
}

pub fn decode_vqa(fwd: &mut Forward<'_>, states: &EncoderOutput, tap: usize, params: &VqaDecoderParams) -> Result<VqaOutput> {
    vqa_head(fwd, states.tap(tap)?, params)
}

pub fn decode_vg(
    fwd: &mut Forward<'_>,
    states: &EncoderOutput,
    tap: usize,
    spans: &[Span],
    params: &VgDecoderParams,
) -> Result<Var> {
    vg_head(fwd, states.tap(tap)?, spans, params)
}

/// Logistic transform of recorded logits.
pub fn probabilities(tape: &Tape, logits: Var) -> Tensor {
    tape.value(logits).sigmoid()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn attention_average_examples() {
        let mut tape = Tape::new();
        let zeros = tape.constant(Tensor::zeros(&[3, 4]));
        let a = attention_average(&mut tape, zeros).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let c = mat(&mut tape, &[vec![0.0, 0.0], vec![3f64.ln(), 0.0]]);
        let a = attention_average(&mut tape, c).unwrap();
        let got = tape.value(a).data();
        assert!((got[0] - 0.625).abs() < 1e-12);
        assert!((got[1] - 0.375).abs() < 1e-12);

        let row = mat(&mut tape, &[vec![0.3, -1.0, 2.0]]);
        let a = attention_average(&mut tape, row).unwrap();
        let plain = Tensor::vector(vec![0.3, -1.0, 2.0]).softmax(0).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn summarize_examples() {
        let mut tape = Tape::new();
        let f = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let alpha = col(&mut tape, &[0.625, 0.375]);
        let v = summarize(&mut tape, f, alpha).unwrap();
        assert_eq!(tape.value(v).data(), &[0.625, 0.375]);

        let f = mat(&mut tape, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let one_hot = col(&mut tape, &[0.0, 1.0, 0.0]);
        let v = summarize(&mut tape, f, one_hot).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 5.0]);
        let uniform = col(&mut tape, &[1.0 / 3.0; 3]);
        let v = summarize(&mut tape, f, uniform).unwrap();
        assert!((tape.value(v).data()[0] - 2.0).abs() < 1e-12);
        let short = col(&mut tape, &[1.0, 0.0]);
        assert!(summarize(&mut tape, f, short).is_err());
    }

    #[test]
    fn bilinear_scores() {
        let mut tape = Tape::new();
        let e1 = col(&mut tape, &[1.0, 0.0]);
        let e2 = col(&mut tape, &[0.0, 1.0]);
        let eye = tape.constant(Tensor::eye(2));
        let l = bilinear_logits(&mut tape, e1, eye, e1).unwrap();
        assert!((sigmoid(tape.value(l).data()[0]) - 0.7311).abs() < 1e-4);
        let l = bilinear_logits(&mut tape, e1, eye, e2).unwrap();
        assert_eq!(sigmoid(tape.value(l).data()[0]), 0.5);
        let two = tape.constant(Tensor::eye(2).map(|v| 2.0 * v));
        let l = bilinear_logits(&mut tape, e1, two, e1).unwrap();
        assert!((sigmoid(tape.value(l).data()[0]) - 0.8808).abs() < 1e-4);
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let l = bilinear_logits(&mut tape, e1, zero, e2).unwrap();
        assert_eq!(sigmoid(tape.value(l).data()[0]), 0.5);
    }

    #[test]
    fn phrase_pool_examples() {
        let mut tape = Tape::new();
        let words = mat(&mut tape, &[vec![2.0, 0.0, 7.0], vec![0.0, 4.0, -1.0]]);
        let p = phrase_pool(&mut tape, words, &[Span::new(1, 2), Span::new(3, 3)]).unwrap();
        assert_eq!(tape.value(p).column(0), vec![1.0, 2.0]);
        assert_eq!(tape.value(p).column(1), vec![7.0, -1.0]);
        assert!(phrase_pool(&mut tape, words, &[Span::new(0, 1)]).is_err());
        assert!(phrase_pool(&mut tape, words, &[Span::new(2, 4)]).is_err());
        assert!(phrase_pool(&mut tape, words, &[Span::new(3, 2)]).is_err());

        let same = mat(&mut tape, &[vec![1.5; 4], vec![-2.0; 4]]);
        let p = phrase_pool(&mut tape, same, &[Span::new(1, 4)]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, -2.0]);
    }
}
