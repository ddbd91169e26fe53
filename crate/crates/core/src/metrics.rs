//! Panoptic quality, accuracy and rolling-mean smoothing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::MetricError;

/// Pixel-wise instance labelling: id 0 is background, every other id is one
/// instance with exactly one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    classes: BTreeMap<u32, u32>,
}

impl InstanceMask {
    pub fn new(
        height: usize,
        width: usize,
        ids: Vec<u32>,
        classes: BTreeMap<u32, u32>,
    ) -> Result<Self, MetricError> {
        if ids.len() != height * width {
            return Err(MetricError::InvalidMask(format!(
                "{} ids for a {height}×{width} mask",
                ids.len()
            )));
        }
        if classes.contains_key(&0) {
            return Err(MetricError::InvalidMask("background id 0 cannot carry a class".into()));
        }
        if let Some(id) = ids.iter().find(|&&id| id != 0 && !classes.contains_key(&id)) {
            return Err(MetricError::InvalidMask(format!("instance {id} has no class label")));
        }
        Ok(InstanceMask { height, width, ids, classes })
    }

    /// Every instance gets class 0.
    pub fn class_agnostic(height: usize, width: usize, ids: Vec<u32>) -> Result<Self, MetricError> {
        let classes = ids.iter().filter(|&&id| id != 0).map(|&id| (id, 0)).collect();
        Self::new(height, width, ids, classes)
    }

    /// Instances are the 4-connected components of each nonzero label;
    /// a component of label `l` gets class `l − 1`.
    pub fn from_semantic(height: usize, width: usize, labels: &[usize]) -> Result<Self, MetricError> {
        if labels.len() != height * width {
            return Err(MetricError::InvalidMask(format!(
                "{} labels for a {height}×{width} mask",
                labels.len()
            )));
        }
        let mut ids = vec![0u32; labels.len()];
        let mut classes = BTreeMap::new();
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..labels.len() {
            if labels[start] == 0 || ids[start] != 0 {
                continue;
            }
            next += 1;
            let label = labels[start];
            classes.insert(next, (label - 1) as u32);
            ids[start] = next;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (y, x) = (p / width, p % width);
                let mut visit = |q: usize| {
                    if labels[q] == label && ids[q] == 0 {
                        ids[q] = next;
                        stack.push(q);
                    }
                };
                if y > 0 {
                    visit(p - width);
                }
                if y + 1 < height {
                    visit(p + width);
                }
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < width {
                    visit(p + 1);
                }
            }
        }
        Ok(InstanceMask { height, width, ids, classes })
    }

    /// Connected components of a foreground mask, all class 0.
    pub fn from_binary(height: usize, width: usize, foreground: &[bool]) -> Result<Self, MetricError> {
        let labels: Vec<usize> = foreground.iter().map(|&f| usize::from(f)).collect();
        Self::from_semantic(height, width, &labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn classes(&self) -> &BTreeMap<u32, u32> {
        &self.classes
    }

    /// Ids actually present in the map, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        set.into_iter().collect()
    }

    pub fn class_of(&self, id: u32) -> Option<u32> {
        self.classes.get(&id).copied()
    }

    pub fn pixel_set(&self, id: u32) -> PixelSet {
        PixelSet {
            height: self.height,
            width: self.width,
            mask: self.ids.iter().map(|&v| v == id).collect(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// A set of pixels in an image of known size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl PixelSet {
    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Self {
        let mut mask = vec![false; height * width];
        for &i in indices {
            mask[i] = true;
        }
        PixelSet { height, width, mask }
    }
}

/// `|a ∩ b| / |a ∪ b|`; undefined (an error) when both sets are empty.
pub fn iou(a: &PixelSet, b: &PixelSet) -> Result<f64, MetricError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricError::DimensionMismatch { left: (a.height, a.width), right: (b.height, b.width) });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(MetricError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// A matched (prediction, ground truth) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matching {
    /// Sorted by gt id.
    pub tp: Vec<MatchedPair>,
    pub fp: Vec<u32>,
    pub fn_: Vec<u32>,
}

/// Per-id areas and pairwise intersections from one pass over the pixels.
struct Overlaps {
    pred_area: BTreeMap<u32, usize>,
    gt_area: BTreeMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

impl Overlaps {
    fn new(pred: &InstanceMask, gt: &InstanceMask) -> Result<Self, MetricError> {
        if pred.dims() != gt.dims() {
            return Err(MetricError::DimensionMismatch { left: pred.dims(), right: gt.dims() });
        }
        let mut o = Overlaps { pred_area: BTreeMap::new(), gt_area: BTreeMap::new(), inter: HashMap::new() };
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p != 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p != 0 && g != 0 {
                *o.inter.entry((p, g)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn iou(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        let u = self.pred_area[&p] + self.gt_area[&g] - i;
        i as f64 / u as f64
    }
}

fn match_with(
    pred: &InstanceMask,
    gt: &InstanceMask,
    same_class_only: bool,
) -> Result<Matching, MetricError> {
    let o = Overlaps::new(pred, gt)?;
    // IoU > 0.5 makes every pred/gt pair unique: two segments of one mask are
    // disjoint, so neither can overlap a third by more than half its union.
    let mut pairs: Vec<MatchedPair> = o
        .inter
        .keys()
        .filter(|(p, g)| !same_class_only || pred.class_of(*p) == gt.class_of(*g))
        .map(|&(p, g)| MatchedPair { pred: p, gt: g, iou: o.iou(p, g) })
        .filter(|m| m.iou > 0.5)
        .collect();
    pairs.sort_by_key(|m| (m.gt, m.pred));
    let matched_pred: BTreeSet<u32> = pairs.iter().map(|m| m.pred).collect();
    let matched_gt: BTreeSet<u32> = pairs.iter().map(|m| m.gt).collect();
    debug_assert_eq!(matched_pred.len(), pairs.len());
    debug_assert_eq!(matched_gt.len(), pairs.len());
    let fp = o.pred_area.keys().copied().filter(|&p| !matched_pred.contains(&p)).collect();
    let fn_ = o.gt_area.keys().copied().filter(|&g| !matched_gt.contains(&g)).collect();
    Ok(Matching { tp: pairs, fp, fn_ })
}

/// Matches predicted to ground-truth segments: a pair matches iff IoU > 0.5.
pub fn match_segments(pred: &InstanceMask, gt: &InstanceMask) -> Result<Matching, MetricError> {
    match_with(pred, gt, false)
}

/// Sufficient statistics of PQ; sums across images before computing ratios.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqStats {
    fn from_matching(m: &Matching) -> Self {
        PqStats { tp: m.tp.len(), fp: m.fp.len(), fn_: m.fn_.len(), iou_sum: m.tp.iter().map(|p| p.iou).sum() }
    }

    pub fn add(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    /// Mean IoU over true positives; 0 without any.
    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    /// `|TP| / (|TP| + ½|FP| + ½|FN|)`; 0 when all counts are 0.
    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqReport {
    pub matching: Matching,
    pub stats: PqStats,
    pub sq: f64,
    pub rq: f64,
    pub pq: f64,
    /// Class-aware runs only: statistics of each class present in the ground truth.
    pub per_class: Option<BTreeMap<u32, PqStats>>,
}

/// Panoptic quality of `pred` against `gt`.
///
/// Class-aware mode matches only same-class pairs and averages SQ, RQ and PQ
/// over the classes present in `gt`; prediction segments of other classes
/// are reported as false positives but belong to no averaged class.
pub fn panoptic_quality(pred: &InstanceMask, gt: &InstanceMask, class_aware: bool) -> Result<PqReport, MetricError> {
    if !class_aware {
        let matching = match_segments(pred, gt)?;
        let stats = PqStats::from_matching(&matching);
        return Ok(PqReport { sq: stats.sq(), rq: stats.rq(), pq: stats.pq(), stats, matching, per_class: None });
    }
    let matching = match_with(pred, gt, true)?;
    let stats = PqStats::from_matching(&matching);
    let per_class = class_stats(pred, gt, &matching);
    let (sq, rq, pq) = average_over_classes(&per_class);
    Ok(PqReport { matching, stats, sq, rq, pq, per_class: Some(per_class) })
}

fn class_stats(pred: &InstanceMask, gt: &InstanceMask, m: &Matching) -> BTreeMap<u32, PqStats> {
    let gt_classes: BTreeSet<u32> = gt.instance_ids().iter().filter_map(|&g| gt.class_of(g)).collect();
    let mut per: BTreeMap<u32, PqStats> = gt_classes.iter().map(|&c| (c, PqStats::default())).collect();
    for pair in &m.tp {
        let s = per.get_mut(&gt.class_of(pair.gt).expect("validated")).expect("gt class");
        s.tp += 1;
        s.iou_sum += pair.iou;
    }
    for &p in &m.fp {
        if let Some(s) = pred.class_of(p).and_then(|c| per.get_mut(&c)) {
            s.fp += 1;
        }
    }
    for &g in &m.fn_ {
        if let Some(s) = gt.class_of(g).and_then(|c| per.get_mut(&c)) {
            s.fn_ += 1;
        }
    }
    per
}

/// `(SQ, RQ, PQ)` averaged over classes; zeros when there are none.
pub fn average_over_classes(per_class: &BTreeMap<u32, PqStats>) -> (f64, f64, f64) {
    if per_class.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = per_class.len() as f64;
    let sum = |f: fn(&PqStats) -> f64| per_class.values().map(f).sum::<f64>() / n;
    (sum(PqStats::sq), sum(PqStats::rq), sum(PqStats::pq))
}

/// Dataset-level PQ: statistics are summed over images before the ratios.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    class_aware: bool,
    total: PqStats,
    per_class: BTreeMap<u32, PqStats>,
}

impl PqAccumulator {
    pub fn new(class_aware: bool) -> Self {
        PqAccumulator { class_aware, ..Default::default() }
    }

    pub fn add(&mut self, pred: &InstanceMask, gt: &InstanceMask) -> Result<(), MetricError> {
        let report = panoptic_quality(pred, gt, self.class_aware)?;
        self.total.add(&report.stats);
        for (c, s) in report.per_class.unwrap_or_default() {
            self.per_class.entry(c).or_default().add(&s);
        }
        Ok(())
    }

    pub fn stats(&self) -> PqStats {
        self.total
    }

    pub fn pq(&self) -> f64 {
        if self.class_aware {
            average_over_classes(&self.per_class).2
        } else {
            self.total.pq()
        }
    }
}

/// Fraction of positions where `predicted == truth`.
pub fn accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Trailing mean over at most `window` points; the first `window − 1`
/// outputs average the shorter available prefix.
pub fn rolling_mean(series: &[f64], window: usize) -> Result<Vec<f64>, MetricError> {
    if window == 0 {
        return Err(MetricError::ZeroWindow);
    }
    let out = (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            series[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    Ok(out)
}
