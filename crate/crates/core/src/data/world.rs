use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{answer_id, BBox, Vocab, REGION_DIM};
use crate::decoders::Span;
use crate::encoder::{ImageInput, SentenceInput};
use crate::metrics::iou;
use crate::rng::{indexed_stream, Rng as StreamRng};
use crate::tensor::Tensor;

/// Side of the square image frame.
pub const FRAME: f64 = 64.0;
/// Synthetic annotators per question; all agree.
pub const NUM_ANNOTATORS: usize = 10;

const FEATURE_NOISE: f64 = 0.05;
const DISTRACTORS: usize = 2;
const MIN_REGION_IOU: f64 = 0.6;
const MAX_DISTRACTOR_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn side_range(self) -> (f64, f64) {
        match self {
            Size::Small => (8.0, 13.0),
            Size::Large => (16.0, 22.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: Size,
    pub bbox: BBox,
}

/// A candidate region as a detector would report it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Existence,
    Counting,
    Attribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerWeight {
    pub answer: usize,
    pub weight: f64,
}

/// A caption phrase and the regions that ground it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub span: Span,
    /// Index into [`World::objects`].
    pub object: usize,
    /// 0-based region indices whose box has IoU >= 0.5 with the object.
    pub gold_regions: Vec<usize>,
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub world_id: u64,
    pub objects: Vec<Object>,
    pub regions: Vec<Region>,
    pub caption: Vec<usize>,
    pub question: Vec<usize>,
    pub question_kind: QuestionKind,
    /// Soft targets derived from the annotations.
    pub answers: Vec<AnswerWeight>,
    /// Raw annotator answers.
    pub annotations: Vec<usize>,
    pub phrases: Vec<Phrase>,
}

impl World {
    pub fn image_input(&self) -> ImageInput {
        let rows: Vec<Vec<f64>> = self.regions.iter().map(|r| r.feature.clone()).collect();
        ImageInput {
            region_features: Tensor::from_rows(&rows).expect("region features are rectangular"),
            region_boxes: self.regions.iter().map(|r| r.bbox).collect(),
        }
    }

    pub fn caption_input(&self) -> SentenceInput {
        SentenceInput {
            token_ids: self.caption.clone(),
        }
    }

    pub fn question_input(&self) -> SentenceInput {
        SentenceInput {
            token_ids: self.question.clone(),
        }
    }

    pub fn spans(&self) -> Vec<Span> {
        self.phrases.iter().map(|p| p.span).collect()
    }

    /// Dense soft-target vector over the answer set.
    pub fn answer_targets(&self, num_answers: usize) -> Vec<f64> {
        let mut t = vec![0.0; num_answers];
        for a in &self.answers {
            if a.answer < num_answers {
                t[a.answer] = a.weight;
            }
        }
        t
    }

    /// `H x T` grounding labels, row-major.
    pub fn grounding_targets(&self) -> Vec<f64> {
        let t = self.regions.len();
        let mut out = vec![0.0; self.phrases.len() * t];
        for (h, p) in self.phrases.iter().enumerate() {
            for &r in &p.gold_regions {
                out[h * t + r] = 1.0;
            }
        }
        out
    }
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, w: f64, h: f64) -> BBox {
    let x1 = rng.random_range(0.0..=FRAME - w);
    let y1 = rng.random_range(0.0..=FRAME - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn place_objects(rng: &mut StreamRng, specs: &[(ShapeKind, Color, Size)]) -> Vec<BBox> {
    'layout: loop {
        let mut boxes: Vec<BBox> = Vec::with_capacity(specs.len());
        for &(_, _, size) in specs {
            let (lo, hi) = size.side_range();
            let mut placed = false;
            for _ in 0..200 {
                let w = rng.random_range(lo..=hi);
                let h = rng.random_range(lo..=hi);
                let b = random_box(rng, w, h);
                if boxes.iter().all(|o| !overlaps(o, &b)) {
                    boxes.push(b);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'layout;
            }
        }
        return boxes;
    }
}

/// Detector-style proposal around `b`: each side moves by up to 10% of the
/// box extent, resampled until IoU with `b` is at least 0.6.
fn jitter(rng: &mut StreamRng, b: &BBox) -> BBox {
    loop {
        let (dx, dy) = (0.1 * b.width(), 0.1 * b.height());
        let j = BBox::new(
            (b.x1 + rng.random_range(-dx..=dx)).clamp(0.0, FRAME),
            (b.y1 + rng.random_range(-dy..=dy)).clamp(0.0, FRAME),
            (b.x2 + rng.random_range(-dx..=dx)).clamp(0.0, FRAME),
            (b.y2 + rng.random_range(-dy..=dy)).clamp(0.0, FRAME),
        );
        if j.is_valid() && iou(&j, b).unwrap_or(0.0) >= MIN_REGION_IOU {
            return j;
        }
    }
}

fn feature(rng: &mut StreamRng, noise: &Normal<f64>, object: Option<&Object>, bbox: &BBox) -> Vec<f64> {
    let mut f = vec![0.0; REGION_DIM];
    if let Some(o) = object {
        f[o.shape.index()] = 1.0;
        f[3 + o.color.index()] = 1.0;
        f[7 + o.size.index()] = 1.0;
    }
    f[9] = bbox.x1 / FRAME;
    f[10] = bbox.y1 / FRAME;
    f[11] = bbox.x2 / FRAME;
    f[12] = bbox.y2 / FRAME;
    for v in &mut f {
        *v += noise.sample(rng);
    }
    f
}

fn caption_words(objects: &[Object]) -> (Vec<&'static str>, Vec<Span>) {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    for (j, o) in objects.iter().enumerate() {
        if j > 0 {
            words.push("and");
        }
        words.push("a");
        let begin = words.len() + 1;
        words.extend([o.size.word(), o.color.word(), o.shape.word()]);
        spans.push(Span::new(begin, words.len()));
    }
    (words, spans)
}

fn ask(rng: &mut StreamRng, objects: &[Object]) -> (QuestionKind, Vec<&'static str>, &'static str) {
    let unique_shapes: Vec<ShapeKind> = ShapeKind::ALL
        .into_iter()
        .filter(|s| objects.iter().filter(|o| o.shape == *s).count() == 1)
        .collect();
    let mut kinds = vec![QuestionKind::Existence, QuestionKind::Counting];
    if !unique_shapes.is_empty() {
        kinds.push(QuestionKind::Attribute);
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    match kind {
        QuestionKind::Existence => {
            let (shape, color) = if rng.random_bool(0.5) {
                let o = &objects[rng.random_range(0..objects.len())];
                (o.shape, o.color)
            } else {
                (
                    ShapeKind::ALL[rng.random_range(0..3)],
                    Color::ALL[rng.random_range(0..4)],
                )
            };
            let present = objects.iter().any(|o| o.shape == shape && o.color == color);
            (
                kind,
                vec!["is", "there", "a", color.word(), shape.word()],
                if present { "yes" } else { "no" },
            )
        }
        QuestionKind::Counting => {
            let shape = if rng.random_bool(0.5) {
                objects[rng.random_range(0..objects.len())].shape
            } else {
                ShapeKind::ALL[rng.random_range(0..3)]
            };
            let n = objects.iter().filter(|o| o.shape == shape).count();
            const COUNTS: [&str; 5] = ["0", "1", "2", "3", "4"];
            (kind, vec!["how", "many", shape.plural()], COUNTS[n])
        }
        QuestionKind::Attribute => {
            let shape = unique_shapes[rng.random_range(0..unique_shapes.len())];
            let o = objects.iter().find(|o| o.shape == shape).expect("unique shape present");
            (kind, vec!["what", "color", "is", "the", shape.word()], o.color.word())
        }
    }
}

/// Builds world `world_id` from `seed`. A pure function of its arguments.
pub fn generate_world(seed: u64, world_id: u64) -> World {
    let mut rng = indexed_stream(seed, "world", world_id);
    let vocab = Vocab::standard();
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid noise scale");

    let count = rng.random_range(2..=4usize);
    let mut specs: Vec<(ShapeKind, Color, Size)> = Vec::with_capacity(count);
    while specs.len() < count {
        let s = (
            ShapeKind::ALL[rng.random_range(0..3)],
            Color::ALL[rng.random_range(0..4)],
            Size::ALL[rng.random_range(0..2)],
        );
        if !specs.contains(&s) {
            specs.push(s);
        }
    }
    let boxes = place_objects(&mut rng, &specs);
    let objects: Vec<Object> = specs
        .iter()
        .zip(boxes)
        .map(|(&(shape, color, size), bbox)| Object {
            shape,
            color,
            size,
            bbox,
        })
        .collect();

    // (source object, region) pairs; distractors have no source.
    let mut regions: Vec<(Option<usize>, Region)> = Vec::with_capacity(count + DISTRACTORS);
    for (j, o) in objects.iter().enumerate() {
        let bbox = jitter(&mut rng, &o.bbox);
        let feature = feature(&mut rng, &noise, Some(o), &bbox);
        regions.push((Some(j), Region { bbox, feature }));
    }
    for _ in 0..DISTRACTORS {
        let bbox = loop {
            let w = rng.random_range(6.0..=20.0);
            let h = rng.random_range(6.0..=20.0);
            let b = random_box(&mut rng, w, h);
            if objects
                .iter()
                .all(|o| iou(&b, &o.bbox).unwrap_or(0.0) < MAX_DISTRACTOR_IOU)
            {
                break b;
            }
        };
        let feature = feature(&mut rng, &noise, None, &bbox);
        regions.push((None, Region { bbox, feature }));
    }
    regions.shuffle(&mut rng);
    let regions: Vec<Region> = regions.into_iter().map(|(_, r)| r).collect();

    let (words, spans) = caption_words(&objects);
    let caption = vocab.encode(&words).expect("caption uses template vocabulary");
    let phrases = spans
        .into_iter()
        .enumerate()
        .map(|(j, span)| Phrase {
            span,
            object: j,
            gold_regions: regions
                .iter()
                .enumerate()
                .filter(|(_, r)| iou(&r.bbox, &objects[j].bbox).unwrap_or(0.0) >= 0.5)
                .map(|(k, _)| k)
                .collect(),
        })
        .collect();

    let (question_kind, qwords, answer) = ask(&mut rng, &objects);
    let question = vocab.encode(&qwords).expect("question uses template vocabulary");
    let answer = answer_id(answer).expect("answer in closed set");
    let annotations = vec![answer; NUM_ANNOTATORS];
    let answers = vec![AnswerWeight {
        answer,
        weight: crate::metrics::vqa_accuracy(answer, &annotations),
    }];

    World {
        world_id,
        objects,
        regions,
        caption,
        question,
        question_kind,
        answers,
        annotations,
        phrases,
    }
}

/// Worlds `0..num_worlds`, generated in parallel.
pub fn generate_worlds(seed: u64, num_worlds: u64) -> Vec<World> {
    (0..num_worlds)
        .into_par_iter()
        .map(|id| generate_world(seed, id))
        .collect()
}
