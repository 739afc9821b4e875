//! Threshold-sweep evaluation: voxel-level segmentation and size-binned
//! lesion-level detection, with best-F1 operating points.
//!
//! Counts are pooled over all volumes before rates are computed. A truth
//! lesion is detected when at least `min_overlap_fraction` of its voxels are
//! predicted positive and the predicted components touching it keep at most
//! `max_outside_fraction` of their voxels outside truth lesions. A predicted
//! component is a false positive when it touches no truth lesion voxel, or
//! when too much of it lies outside truth lesions. Truth lesions below
//! `min_lesion_size` are ignored; predictions touching only those are neutral.
//! False positives are binned by the predicted component's size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, Volume};
use crate::lesions::{label_components, Connectivity, LabelMap, SizeBin};
use crate::par;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for VoxelCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub detected: u64,
    pub missed: u64,
    pub false_positive: u64,
}

impl std::ops::AddAssign for BinCounts {
    fn add_assign(&mut self, o: Self) {
        self.detected += o.detected;
        self.missed += o.missed;
        self.false_positive += o.false_positive;
    }
}

impl BinCounts {
    pub fn rates(&self) -> Rates {
        rates(self.detected, self.false_positive, self.missed)
    }
}

/// Detection counts for the small, medium and large bins plus their total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub small: BinCounts,
    pub medium: BinCounts,
    pub large: BinCounts,
    pub all: BinCounts,
}

impl DetectionCounts {
    pub fn bin(&self, bin: SizeBin) -> &BinCounts {
        match bin {
            SizeBin::Small => &self.small,
            SizeBin::Medium => &self.medium,
            SizeBin::Large => &self.large,
            SizeBin::Tiny => panic!("tiny lesions are not a detection bin"),
        }
    }

    fn bin_mut(&mut self, bin: SizeBin) -> &mut BinCounts {
        match bin {
            SizeBin::Small | SizeBin::Tiny => &mut self.small,
            SizeBin::Medium => &mut self.medium,
            SizeBin::Large => &mut self.large,
        }
    }

    fn finish(&mut self) {
        let mut all = self.small;
        all += self.medium;
        all += self.large;
        self.all = all;
    }
}

impl std::ops::AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        self.small += o.small;
        self.medium += o.medium;
        self.large += o.large;
        self.all += o.all;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub min_overlap_fraction: f64,
    /// Truth lesions smaller than this are ignored.
    pub min_lesion_size: usize,
    /// Largest share of a predicted component's voxels that may lie outside
    /// every truth lesion before the component is treated as spurious. `1.0`
    /// turns the check off.
    pub max_outside_fraction: f64,
    pub connectivity: Connectivity,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            min_overlap_fraction: 0.1,
            min_lesion_size: 3,
            max_outside_fraction: 0.65,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "min_overlap_fraction must lie in (0, 1], got {}",
                self.min_overlap_fraction
            )));
        }
        if !(self.max_outside_fraction > 0.0 && self.max_outside_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "max_outside_fraction must lie in (0, 1], got {}",
                self.max_outside_fraction
            )));
        }
        Ok(())
    }

    fn outside_ok(&self, size: usize, on_truth: usize) -> bool {
        self.max_outside_fraction >= 1.0
            || (size - on_truth) as f64 <= self.max_outside_fraction * size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: f64,
    pub fdr: f64,
    pub f1: f64,
}

/// TPR, FDR and F1 with the conventions tpr = 1 when tp + fn = 0,
/// fdr = 0 when tp + fp = 0 and f1 = 1 when all three counts are zero.
pub fn rates(tp: u64, fp: u64, fn_: u64) -> Rates {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let tpr = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    let fdr = if tp + fp == 0.0 { 0.0 } else { fp / (tp + fp) };
    let denom = 2.0 * tp + fp + fn_;
    let f1 = if denom == 0.0 { 1.0 } else { 2.0 * tp / denom };
    Rates { tpr, fdr, f1 }
}

impl VoxelCounts {
    pub fn rates(&self) -> Rates {
        rates(self.tp, self.fp, self.fn_)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(())
}

fn count_voxels(prob: &[f32], truth: &[u8], tau: f64) -> VoxelCounts {
    let mut c = VoxelCounts::default();
    for (&p, &y) in prob.iter().zip(truth) {
        match (p as f64 >= tau, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Confusion counts of `prob >= tau` against `truth`.
pub fn voxel_counts(prob: &Volume, truth: &Mask, tau: f64) -> Result<VoxelCounts> {
    prob.dims().ensure_same(&truth.dims())?;
    check_tau(tau)?;
    Ok(count_voxels(prob.data(), truth.data(), tau))
}

/// Lesion-level detection counts for a predicted labelling against the truth.
pub fn match_lesions(pred: &LabelMap, truth: &LabelMap, config: &DetectionConfig) -> Result<DetectionCounts> {
    pred.dims().ensure_same(&truth.dims())?;
    config.validate()?;
    Ok(match_index(pred, &TruthIndex::new(truth.clone()), config))
}

/// Truth lesions of one volume, indexed by label.
struct TruthIndex {
    labels: LabelMap,
    sizes: Vec<usize>,
    voxels: Vec<Vec<usize>>,
}

impl TruthIndex {
    fn new(labels: LabelMap) -> Self {
        let mut voxels = vec![Vec::new(); labels.count() + 1];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l > 0 {
                voxels[l as usize].push(i);
            }
        }
        let sizes = voxels.iter().map(Vec::len).collect();
        Self {
            labels,
            sizes,
            voxels,
        }
    }

    fn eligible(&self, config: &DetectionConfig) -> impl Iterator<Item = usize> + '_ {
        let min = config.min_lesion_size;
        (1..self.sizes.len()).filter(move |&t| self.sizes[t] >= min)
    }
}

/// Size, voxels on any truth lesion, and whether it touches truth at all.
#[derive(Debug, Clone, Copy, Default)]
struct ComponentStats {
    size: usize,
    on_truth: usize,
}

impl ComponentStats {
    fn merge(self, o: Self) -> Self {
        ComponentStats {
            size: self.size + o.size,
            on_truth: self.on_truth + o.on_truth,
        }
    }

    /// Bin under which this predicted component counts as a false positive.
    fn false_positive_bin(&self, config: &DetectionConfig) -> Option<SizeBin> {
        if self.on_truth == 0 || !config.outside_ok(self.size, self.on_truth) {
            Some(SizeBin::of_size(self.size))
        } else {
            None
        }
    }
}

fn truth_status(covered: usize, size: usize, union: ComponentStats, config: &DetectionConfig) -> bool {
    covered as f64 >= config.min_overlap_fraction * size as f64 && config.outside_ok(union.size, union.on_truth)
}

fn match_index(pred: &LabelMap, truth: &TruthIndex, config: &DetectionConfig) -> DetectionCounts {
    let mut stats = vec![ComponentStats::default(); pred.count() + 1];
    for (&p, &t) in pred.labels().iter().zip(truth.labels.labels()) {
        if p > 0 {
            stats[p as usize].size += 1;
            if t > 0 {
                stats[p as usize].on_truth += 1;
            }
        }
    }
    let mut counts = DetectionCounts::default();
    for t in truth.eligible(config) {
        let mut touching: Vec<u32> = truth.voxels[t]
            .iter()
            .map(|&v| pred.labels()[v])
            .filter(|&p| p > 0)
            .collect();
        let covered = touching.len();
        touching.sort_unstable();
        touching.dedup();
        let union = touching
            .iter()
            .fold(ComponentStats::default(), |acc, &p| acc.merge(stats[p as usize]));
        let bin = counts.bin_mut(SizeBin::of_size(truth.sizes[t]));
        if truth_status(covered, truth.sizes[t], union, config) {
            bin.detected += 1;
        } else {
            bin.missed += 1;
        }
    }
    for s in &stats[1..] {
        if let Some(bin) = s.false_positive_bin(config) {
            counts.bin_mut(bin).false_positive += 1;
        }
    }
    counts.finish();
    counts
}

/// Union-find over voxels switched on in order of decreasing probability,
/// tracking per-component statistics and the running false-positive tally.
struct IncrementalComponents<'a> {
    dims: Dims,
    offsets: Vec<[i32; 3]>,
    truth: &'a [u8],
    config: &'a DetectionConfig,
    parent: Vec<u32>,
    stats: Vec<ComponentStats>,
    active: Vec<bool>,
    fp: [u64; 3],
}

impl<'a> IncrementalComponents<'a> {
    fn new(dims: Dims, truth: &'a [u8], config: &'a DetectionConfig) -> Self {
        let n = dims.len();
        Self {
            dims,
            offsets: config.connectivity.offsets(),
            truth,
            config,
            parent: (0..n as u32).collect(),
            stats: vec![ComponentStats::default(); n],
            active: vec![false; n],
            fp: [0; 3],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn tally(&mut self, root: u32, sign: i64) {
        if let Some(bin) = self.stats[root as usize].false_positive_bin(self.config) {
            let k = match bin {
                SizeBin::Tiny | SizeBin::Small => 0,
                SizeBin::Medium => 1,
                SizeBin::Large => 2,
            };
            self.fp[k] = (self.fp[k] as i64 + sign) as u64;
        }
    }

    fn activate(&mut self, i: usize) {
        self.active[i] = true;
        self.stats[i] = ComponentStats {
            size: 1,
            on_truth: (self.truth[i] == 1) as usize,
        };
        self.tally(i as u32, 1);
        let (x, y, z) = self.dims.coords(i);
        for k in 0..self.offsets.len() {
            let [dx, dy, dz] = self.offsets[k];
            let (qx, qy, qz) = (x as i64 + dx as i64, y as i64 + dy as i64, z as i64 + dz as i64);
            if qx < 0
                || qy < 0
                || qz < 0
                || qx >= self.dims.nx as i64
                || qy >= self.dims.ny as i64
                || qz >= self.dims.nz as i64
            {
                continue;
            }
            let j = self.dims.index_unchecked(qx as usize, qy as usize, qz as usize);
            if !self.active[j] {
                continue;
            }
            let ra = self.find(i as u32);
            let rb = self.find(j as u32);
            if ra == rb {
                continue;
            }
            self.tally(ra, -1);
            self.tally(rb, -1);
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
            self.stats[lo as usize] = self.stats[lo as usize].merge(self.stats[hi as usize]);
            self.tally(lo, 1);
        }
    }
}

/// Voxel and detection counts of a single volume at every threshold of
/// `taus` (returned in the order given).
pub fn volume_counts(prob: &Volume, truth: &Mask, taus: &[f64], config: &DetectionConfig) -> Result<Vec<ThresholdCounts>> {
    prob.dims().ensure_same(&truth.dims())?;
    config.validate()?;
    for &t in taus {
        check_tau(t)?;
    }
    let dims = prob.dims();
    let p = prob.data();
    let index = TruthIndex::new(label_components(truth, config.connectivity));
    let eligible: Vec<usize> = index.eligible(config).collect();
    let truth_total = truth.foreground_count() as u64;
    let negatives = dims.len() as u64 - truth_total;

    let mut order: Vec<usize> = (0..dims.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut by_tau: Vec<usize> = (0..taus.len()).collect();
    by_tau.sort_by(|&a, &b| taus[b].total_cmp(&taus[a]));

    let mut cc = IncrementalComponents::new(dims, truth.data(), config);
    let mut covered = vec![0usize; index.sizes.len()];
    let mut tp = 0u64;
    let mut on = 0u64;
    let mut next = 0usize;
    let mut out = vec![None; taus.len()];
    for &k in &by_tau {
        let tau = taus[k];
        while next < order.len() && p[order[next]] as f64 >= tau {
            let i = order[next];
            cc.activate(i);
            on += 1;
            if truth.data()[i] == 1 {
                tp += 1;
                covered[index.labels.labels()[i] as usize] += 1;
            }
            next += 1;
        }
        let mut det = DetectionCounts::default();
        for &t in &eligible {
            let mut roots: Vec<u32> = Vec::new();
            for &v in &index.voxels[t] {
                if cc.active[v] {
                    roots.push(cc.find(v as u32));
                }
            }
            roots.sort_unstable();
            roots.dedup();
            let union = roots
                .iter()
                .fold(ComponentStats::default(), |acc, &r| acc.merge(cc.stats[r as usize]));
            let bin = det.bin_mut(SizeBin::of_size(index.sizes[t]));
            if truth_status(covered[t], index.sizes[t], union, config) {
                bin.detected += 1;
            } else {
                bin.missed += 1;
            }
        }
        det.small.false_positive = cc.fp[0];
        det.medium.false_positive = cc.fp[1];
        det.large.false_positive = cc.fp[2];
        det.finish();
        let fp = on - tp;
        out[k] = Some(ThresholdCounts {
            tau,
            voxel: VoxelCounts {
                tp,
                fp,
                fn_: truth_total - tp,
                tn: negatives - fp,
            },
            detection: det,
        });
    }
    Ok(out.into_iter().map(|c| c.expect("every threshold visited")).collect())
}

/// Default threshold grid `0.01, 0.02, ..., 0.99`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub tau: f64,
    pub voxel: VoxelCounts,
    pub detection: DetectionCounts,
}

/// Counts pooled over all volumes, one entry per threshold in ascending order.
pub fn sweep_counts(
    probs: &[Volume],
    truths: &[Mask],
    taus: &[f64],
    config: &DetectionConfig,
) -> Result<Vec<ThresholdCounts>> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: truths.len(),
            found: probs.len(),
        });
    }
    config.validate()?;
    let mut taus = taus.to_vec();
    for &t in &taus {
        check_tau(t)?;
    }
    taus.sort_by(|a, b| a.total_cmp(b));
    let per_volume = par::map_range(probs.len(), |k| volume_counts(&probs[k], &truths[k], &taus, config));
    let mut pooled: Vec<ThresholdCounts> = taus
        .iter()
        .map(|&tau| ThresholdCounts {
            tau,
            voxel: VoxelCounts::default(),
            detection: DetectionCounts::default(),
        })
        .collect();
    for counts in per_volume {
        for (acc, c) in pooled.iter_mut().zip(counts?) {
            acc.voxel += c.voxel;
            acc.detection += c.detection;
        }
    }
    Ok(pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub tau: f64,
    pub voxel: Rates,
    pub det_all: Rates,
    pub det_small: Rates,
    pub det_medium: Rates,
    pub det_large: Rates,
    pub counts: ThresholdCounts,
}

impl From<ThresholdCounts> for CurveRow {
    fn from(c: ThresholdCounts) -> Self {
        CurveRow {
            tau: c.tau,
            voxel: c.voxel.rates(),
            det_all: c.detection.all.rates(),
            det_small: c.detection.small.rates(),
            det_medium: c.detection.medium.rates(),
            det_large: c.detection.large.rates(),
            counts: c,
        }
    }
}

impl CurveRow {
    pub fn det(&self, bin: Option<SizeBin>) -> Rates {
        match bin {
            None => self.det_all,
            Some(SizeBin::Small) => self.det_small,
            Some(SizeBin::Medium) => self.det_medium,
            Some(SizeBin::Large) => self.det_large,
            Some(SizeBin::Tiny) => panic!("tiny lesions are not a detection bin"),
        }
    }
}

pub fn sweep_curves(probs: &[Volume], truths: &[Mask], taus: &[f64], config: &DetectionConfig) -> Result<Vec<CurveRow>> {
    Ok(sweep_counts(probs, truths, taus, config)?
        .into_iter()
        .map(CurveRow::from)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingReport {
    pub tau_seg: f64,
    pub tau_det: f64,
    pub gap: f64,
    pub f1_seg: f64,
    pub f1_det: f64,
    pub simultaneous_f1: f64,
    pub tau_star: f64,
    pub voxel_f1_at_star: f64,
    pub det_f1_at_star: f64,
    pub det_small_f1_at_star: f64,
}

fn argmax(rows: &[CurveRow], key: impl Fn(&CurveRow) -> f64) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        if key(r) > key(&rows[best]) {
            best = i;
        }
    }
    best
}

/// Best segmentation and detection operating points; ties go to the smallest threshold.
pub fn operating_report(rows: &[CurveRow]) -> Result<OperatingReport> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seg = argmax(rows, |r| r.voxel.f1);
    let det = argmax(rows, |r| r.det_all.f1);
    let star = argmax(rows, |r| r.voxel.f1.min(r.det_all.f1));
    let (s, d, t) = (&rows[seg], &rows[det], &rows[star]);
    Ok(OperatingReport {
        tau_seg: s.tau,
        tau_det: d.tau,
        gap: (d.tau - s.tau).abs(),
        f1_seg: s.voxel.f1,
        f1_det: d.det_all.f1,
        simultaneous_f1: t.voxel.f1.min(t.det_all.f1),
        tau_star: t.tau,
        voxel_f1_at_star: t.voxel.f1,
        det_f1_at_star: t.det_all.f1,
        det_small_f1_at_star: t.det_small.f1,
    })
}

pub const CURVE_HEADER: [&str; 16] = [
    "tau",
    "vox_tpr",
    "vox_fdr",
    "vox_f1",
    "det_tpr_all",
    "det_fdr_all",
    "det_f1_all",
    "det_tpr_small",
    "det_fdr_small",
    "det_f1_small",
    "det_tpr_medium",
    "det_fdr_medium",
    "det_f1_medium",
    "det_tpr_large",
    "det_fdr_large",
    "det_f1_large",
];

/// Writes curve rows as CSV with the columns of [`CURVE_HEADER`].
pub fn write_curves_csv<W: std::io::Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for r in rows {
        let mut rec = vec![format!("{:.2}", r.tau)];
        for rate in [r.voxel, r.det_all, r.det_small, r.det_medium, r.det_large] {
            rec.push(format!("{:.6}", rate.tpr));
            rec.push(format!("{:.6}", rate.fdr));
            rec.push(format!("{:.6}", rate.f1));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
