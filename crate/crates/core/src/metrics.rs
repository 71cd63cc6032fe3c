//! Exact segmentation metrics over integer masks: per-class and mean IoU,
//! Dice (two variants), and false-positive rate, all derived from one
//! mergeable confusion accumulator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Division-by-zero guard shared by every metric.
pub const METRIC_EPS: Elem = 1e-7;

/// Collapse `[B, C, H, W]` logits to per-pixel class indices (ties keep the
/// lowest class).
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!("argmax expects [B, C, H, W] logits, got {s:?}")));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if c == 0 || c > u8::MAX as usize + 1 {
        return Err(Error::Contract(format!("{c} classes do not fit a u8 mask")));
    }
    let data = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let img = &data[bi * c * hw..(bi + 1) * c * hw];
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = img[p];
            for ci in 1..c {
                let v = img[ci * hw + p];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Dice has two published shapes; reports label which one they used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiceVariant {
    /// `(2·TP + ε) / (2·TP + FP + FN + ε)` — the conventional coefficient,
    /// bounded by 1.
    #[default]
    Standard,
    /// `(2·TP + ε) / (TP + FP + FN + ε)` — divides twice the intersection
    /// by the union, so perfect masks score ≈ 2.
    AsPrinted,
}

impl DiceVariant {
    pub fn name(self) -> &'static str {
        match self {
            DiceVariant::Standard => "standard",
            DiceVariant::AsPrinted => "as-printed",
        }
    }

    pub fn parse(s: &str) -> Result<DiceVariant> {
        match s {
            "standard" => Ok(DiceVariant::Standard),
            "as-printed" | "as_printed" => Ok(DiceVariant::AsPrinted),
            other => Err(Error::Config(format!(
                "unknown dice variant {other:?} (expected standard or as-printed)"
            ))),
        }
    }
}

/// Per-class pixel tallies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub tn: u64,
}

/// Per-class scores plus two aggregate means: `mean` over every class
/// (absent classes score 1.0 through the ε convention) and `mean_present`
/// restricted to classes that occur in the ground truth or the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<Elem>,
    pub present: Vec<bool>,
    pub mean: Elem,
    pub mean_present: Elem,
}

/// Full pairwise confusion matrix, indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Result<ConfusionAccumulator> {
        if num_classes == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionAccumulator {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one `h×w` prediction/ground-truth mask pair (row-major).
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
        if pred.len() != h * w || gt.len() != h * w {
            return Err(Error::Contract(format!(
                "confusion: mask lengths {} / {} do not cover {h}x{w} pixels",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.num_classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if (p as usize) >= n || (g as usize) >= n {
                return Err(Error::Contract(format!(
                    "confusion: class (pred={p}, gt={g}) out of range for {n} classes at \
                     pixel (y={}, x={})",
                    i / w,
                    i % w
                )));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    /// Fold another accumulator's tallies into this one.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Contract(format!(
                "confusion: cannot merge {}-class into {}-class accumulator",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let n = self.num_classes;
        let tp = self.counts[c * n + c];
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.counts[g * n + c]).sum();
        let fn_count: u64 = (0..n).filter(|&p| p != c).map(|p| self.counts[c * n + p]).sum();
        let tn = self.total_pixels() - tp - fp - fn_count;
        ClassCounts { tp, fp, fn_count, tn }
    }

    fn report(&self, score: impl Fn(ClassCounts) -> Elem) -> MetricReport {
        let mut per_class = Vec::with_capacity(self.num_classes);
        let mut present = Vec::with_capacity(self.num_classes);
        let (mut sum, mut sum_present, mut n_present) = (0.0, 0.0, 0usize);
        for c in 0..self.num_classes {
            let counts = self.class_counts(c);
            let v = score(counts);
            let occurs = counts.tp + counts.fp + counts.fn_count > 0;
            per_class.push(v);
            present.push(occurs);
            sum += v;
            if occurs {
                sum_present += v;
                n_present += 1;
            }
        }
        let mean = sum / self.num_classes as Elem;
        let mean_present = if n_present > 0 { sum_present / n_present as Elem } else { mean };
        MetricReport { per_class, present, mean, mean_present }
    }

    /// Intersection over union, `(TP + ε) / (TP + FP + FN + ε)`.
    pub fn iou(&self) -> MetricReport {
        self.report(|c| {
            (c.tp as Elem + METRIC_EPS) / ((c.tp + c.fp + c.fn_count) as Elem + METRIC_EPS)
        })
    }

    pub fn dice(&self, variant: DiceVariant) -> MetricReport {
        self.report(|c| {
            let num = 2.0 * c.tp as Elem + METRIC_EPS;
            match variant {
                DiceVariant::Standard => num / ((2 * c.tp + c.fp + c.fn_count) as Elem + METRIC_EPS),
                DiceVariant::AsPrinted => num / ((c.tp + c.fp + c.fn_count) as Elem + METRIC_EPS),
            }
        })
    }

    /// False-positive rate, `(FP + ε) / (FP + TN + ε)`.
    pub fn fpr(&self) -> MetricReport {
        self.report(|c| (c.fp as Elem + METRIC_EPS) / ((c.fp + c.tn) as Elem + METRIC_EPS))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Evaluation summary over named classes, printable as an aligned table or
/// as tab-separated rows.
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub dice_variant: DiceVariant,
    pub iou: MetricReport,
    pub dice: MetricReport,
    pub fpr: MetricReport,
}

impl EvalReport {
    pub fn from_accumulator(
        acc: &ConfusionAccumulator,
        class_names: &[String],
        dice_variant: DiceVariant,
    ) -> Result<EvalReport> {
        if class_names.len() != acc.num_classes() {
            return Err(Error::Contract(format!(
                "report: {} class names for {} classes",
                class_names.len(),
                acc.num_classes()
            )));
        }
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            dice_variant,
            iou: acc.iou(),
            dice: acc.dice(dice_variant),
            fpr: acc.fpr(),
        })
    }

    fn rows(&self) -> Vec<(String, Elem, Elem, Elem)> {
        let mut rows: Vec<(String, Elem, Elem, Elem)> = self
            .class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                (name.clone(), self.iou.per_class[c], self.dice.per_class[c], self.fpr.per_class[c])
            })
            .collect();
        rows.push(("mean".into(), self.iou.mean, self.dice.mean, self.fpr.mean));
        rows.push((
            "mean-present".into(),
            self.iou.mean_present,
            self.dice.mean_present,
            self.fpr.mean_present,
        ));
        rows
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let name_w = rows
            .iter()
            .map(|(n, ..)| n.len())
            .chain(std::iter::once("class".len()))
            .max()
            .unwrap();
        let dice_col = format!("dice({})", self.dice_variant.name());
        let mut out = format!("{:<name_w$}  {:>8}  {:>16}  {:>8}\n", "class", "iou", dice_col, "fpr");
        for (name, iou, dice, fpr) in rows {
            out.push_str(&format!(
                "{name:<name_w$}  {iou:>8.4}  {dice:>16.4}  {fpr:>8.4}\n"
            ));
        }
        out
    }

    /// Tab-separated rows with full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("class\tiou\tdice_{}\tfpr\n", self.dice_variant.name());
        for (name, iou, dice, fpr) in self.rows() {
            out.push_str(&format!("{name}\t{iou}\t{dice}\t{fpr}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// The pred=[[0,1],[1,1]] vs gt=[[0,1],[0,1]] two-class example.
    fn derived_case() -> ConfusionAccumulator {
        let mut acc = ConfusionAccumulator::new(2).unwrap();
        acc.accumulate(&[0, 1, 1, 1], &[0, 1, 0, 1], 2, 2).unwrap();
        acc
    }

    #[test]
    fn argmax_picks_highest_and_breaks_ties_low() {
        // [1, 3, 1, 2]: pixel 0 favors class 2, pixel 1 ties classes 0 and 1.
        let logits =
            Tensor::new(vec![0.1, 0.5, 0.2, 0.5, 0.9, 0.3], &[1, 3, 1, 2]).unwrap();
        assert_eq!(argmax_classes(&logits).unwrap(), vec![2, 0]);

        let bad = Tensor::full(0.0, &[2, 3, 4]);
        assert!(argmax_classes(&bad).is_err());
    }

    #[test]
    fn derived_counts() {
        let acc = derived_case();
        assert_eq!(
            acc.class_counts(0),
            ClassCounts { tp: 1, fp: 0, fn_count: 1, tn: 2 }
        );
        assert_eq!(
            acc.class_counts(1),
            ClassCounts { tp: 2, fp: 1, fn_count: 0, tn: 1 }
        );
        assert_eq!(acc.total_pixels(), 4);
    }

    #[test]
    fn derived_iou() {
        let iou = derived_case().iou();
        let c0 = (1.0 + METRIC_EPS) / (2.0 + METRIC_EPS);
        let c1 = (2.0 + METRIC_EPS) / (3.0 + METRIC_EPS);
        assert_eq!(iou.per_class, vec![c0, c1]);
        assert!((iou.per_class[0] - 0.5).abs() < 1e-7);
        assert!((iou.per_class[1] - 2.0 / 3.0).abs() < 1e-7);
        assert!((iou.mean - 7.0 / 12.0).abs() < 1e-7);
    }

    #[test]
    fn derived_dice_both_variants() {
        let acc = derived_case();
        let std = acc.dice(DiceVariant::Standard);
        assert!((std.per_class[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((std.per_class[1] - 4.0 / 5.0).abs() < 1e-7);
        let printed = acc.dice(DiceVariant::AsPrinted);
        assert!((printed.per_class[0] - 1.0).abs() < 1e-7);
        assert!((printed.per_class[1] - 4.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn derived_fpr() {
        // Class 1: FP=1 (pixel (1,0)), TN=1 (pixel (0,0)); the count
        // invariant TP+FP+FN+TN = 4 fixes TN, so FPR = (1+ε)/(2+ε).
        let fpr = derived_case().fpr();
        assert!(fpr.per_class[0] < 1e-7);
        assert!((fpr.per_class[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn perfect_masks() {
        let mut acc = ConfusionAccumulator::new(3).unwrap();
        let mask = [0u8, 1, 2, 1, 0, 2];
        acc.accumulate(&mask, &mask, 2, 3).unwrap();
        for v in acc.iou().per_class {
            assert_eq!(v, 1.0);
        }
        for v in acc.dice(DiceVariant::Standard).per_class {
            assert_eq!(v, 1.0);
        }
        for v in acc.dice(DiceVariant::AsPrinted).per_class {
            assert!(v > 1.99, "as-printed dice on perfect masks should approach 2, got {v}");
        }
        for v in acc.fpr().per_class {
            assert!(v < 1e-6);
        }
    }

    #[test]
    fn one_pixel_example() {
        let mut acc = ConfusionAccumulator::new(2).unwrap();
        acc.accumulate(&[0], &[0], 1, 1).unwrap();
        assert_eq!(acc.class_counts(0).tp, 1);
        assert_eq!(acc.class_counts(1).tn, 1);
    }

    #[test]
    fn absent_class_scores_one_and_is_flagged() {
        let mut acc = ConfusionAccumulator::new(3).unwrap();
        acc.accumulate(&[0, 1, 0, 1], &[0, 1, 1, 0], 2, 2).unwrap();
        let iou = acc.iou();
        assert_eq!(iou.per_class[2], 1.0);
        assert_eq!(iou.present, vec![true, true, false]);
        let with_absent = iou.mean;
        let without = iou.mean_present;
        assert!((with_absent - (iou.per_class[0] + iou.per_class[1] + 1.0) / 3.0).abs() < 1e-15);
        assert!((without - (iou.per_class[0] + iou.per_class[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_wrong_binary_fpr_is_one() {
        let mut acc = ConfusionAccumulator::new(2).unwrap();
        acc.accumulate(&[0, 0, 0], &[1, 1, 1], 1, 3).unwrap();
        assert_eq!(acc.fpr().per_class[0], 1.0);
    }

    #[test]
    fn merge_equals_single_pass_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masks: Vec<(Vec<u8>, Vec<u8>)> = (0..6)
            .map(|_| {
                let n = 12;
                let p = (0..n).map(|_| rng.random_range(0..4u8)).collect();
                let g = (0..n).map(|_| rng.random_range(0..4u8)).collect();
                (p, g)
            })
            .collect();

        let mut whole = ConfusionAccumulator::new(4).unwrap();
        for (p, g) in &masks {
            whole.accumulate(p, g, 3, 4).unwrap();
        }

        let mut parts: Vec<ConfusionAccumulator> = Vec::new();
        for chunk in masks.chunks(2) {
            let mut acc = ConfusionAccumulator::new(4).unwrap();
            for (p, g) in chunk {
                acc.accumulate(p, g, 3, 4).unwrap();
            }
            parts.push(acc);
        }
        let mut forward = parts[0].clone();
        forward.merge(&parts[1]).unwrap();
        forward.merge(&parts[2]).unwrap();
        let mut backward = parts[2].clone();
        backward.merge(&parts[1]).unwrap();
        backward.merge(&parts[0]).unwrap();
        assert_eq!(forward, whole);
        assert_eq!(backward, whole);
    }

    #[test]
    fn matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let nc = rng.random_range(1..=4usize);
            let h = rng.random_range(1..=5usize);
            let w = rng.random_range(1..=5usize);
            let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..nc) as u8).collect();
            let gt: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..nc) as u8).collect();
            let mut acc = ConfusionAccumulator::new(nc).unwrap();
            acc.accumulate(&pred, &gt, h, w).unwrap();

            for c in 0..nc {
                let (mut tp, mut fp, mut fn_c, mut tn) = (0u64, 0u64, 0u64, 0u64);
                for i in 0..h * w {
                    match (pred[i] as usize == c, gt[i] as usize == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_c += 1,
                        (false, false) => tn += 1,
                    }
                }
                let counts = acc.class_counts(c);
                assert_eq!(counts, ClassCounts { tp, fp, fn_count: fn_c, tn }, "trial {trial}");
                let iou = (tp as Elem + METRIC_EPS) / ((tp + fp + fn_c) as Elem + METRIC_EPS);
                let dice =
                    (2.0 * tp as Elem + METRIC_EPS) / ((2 * tp + fp + fn_c) as Elem + METRIC_EPS);
                let fpr = (fp as Elem + METRIC_EPS) / ((fp + tn) as Elem + METRIC_EPS);
                assert_eq!(acc.iou().per_class[c], iou);
                assert_eq!(acc.dice(DiceVariant::Standard).per_class[c], dice);
                assert_eq!(acc.fpr().per_class[c], fpr);
            }
        }
    }

    #[test]
    fn standard_dice_dominates_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let nc = rng.random_range(2..=4usize);
            let pred: Vec<u8> = (0..16).map(|_| rng.random_range(0..nc) as u8).collect();
            let gt: Vec<u8> = (0..16).map(|_| rng.random_range(0..nc) as u8).collect();
            let mut acc = ConfusionAccumulator::new(nc).unwrap();
            acc.accumulate(&pred, &gt, 4, 4).unwrap();
            let iou = acc.iou();
            let dice = acc.dice(DiceVariant::Standard);
            for c in 0..nc {
                assert!(dice.per_class[c] + 1e-15 >= iou.per_class[c]);
                assert!(iou.per_class[c] >= 0.0 && iou.per_class[c] <= 1.0);
                assert!(dice.per_class[c] >= 0.0 && dice.per_class[c] <= 1.0);
            }
        }
    }

    #[test]
    fn contract_errors_carry_pixel_coordinates() {
        let mut acc = ConfusionAccumulator::new(2).unwrap();
        let err = acc.accumulate(&[0, 1], &[0], 1, 2).err().unwrap();
        assert!(matches!(err, Error::Contract(_)), "{err}");

        let err = acc.accumulate(&[0, 3, 0, 0], &[0, 0, 0, 0], 2, 2).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("pred=3") && msg.contains("y=0") && msg.contains("x=1"), "{msg}");

        let other = ConfusionAccumulator::new(3).unwrap();
        assert!(acc.merge(&other).is_err());
    }

    #[test]
    fn report_formats() {
        let acc = derived_case();
        let names = vec!["background".to_string(), "tool".to_string()];
        let report = EvalReport::from_accumulator(&acc, &names, DiceVariant::Standard).unwrap();

        let text = report.to_text();
        assert!(text.contains("dice(standard)"), "{text}");
        assert!(text.lines().count() == 5, "{text}");
        assert!(text.contains("mean-present"));

        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "class\tiou\tdice_standard\tfpr");
        let tool: Vec<&str> = lines[2].split('\t').collect();
        assert_eq!(tool[0], "tool");
        let v: Elem = tool[1].parse().unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-7);

        let err = EvalReport::from_accumulator(&acc, &names[..1], DiceVariant::Standard);
        assert!(err.is_err());
    }
}
