//! Micro-averaged Dice scores with NaN-mean aggregation.

use std::io::Write;

use crate::error::{Error, Result};

/// Pixel counts `(tp, fp, fn)` of class `c`.
pub fn confusion(pred: &[u8], gt: &[u8], c: u8) -> Result<(u64, u64, u64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice",
            format!("{} predicted vs {} reference pixels", pred.len(), gt.len()),
        ));
    }
    let (mut tp, mut fp, mut fne) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == c, g == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fne))
}

/// `2TP / (2TP + FP + FN)`, or `None` when the class is absent from both.
pub fn dice_from_counts(tp: u64, fp: u64, fne: u64) -> Option<f64> {
    let denom = 2 * tp + fp + fne;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

pub fn dsc_class_slide(pred: &[u8], gt: &[u8], c: u8) -> Result<Option<f64>> {
    let (tp, fp, fne) = confusion(pred, gt, c)?;
    Ok(dice_from_counts(tp, fp, fne))
}

/// Per-class scores of one slide.
pub fn slide_dice(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<Option<f64>>> {
    (0..classes)
        .map(|c| dsc_class_slide(pred, gt, c as u8))
        .collect()
}

/// Mean of the defined entries.
pub fn nan_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub slides: Vec<String>,
    pub classes: usize,
    /// Slide-major `slides x classes` table.
    pub table: Vec<Option<f64>>,
    pub per_class: Vec<Option<f64>>,
    pub per_slide: Vec<Option<f64>>,
    pub total: f64,
}

impl DiceReport {
    pub fn get(&self, slide: usize, class: usize) -> Option<f64> {
        self.table[slide * self.classes + class]
    }

    /// Total restricted to a subset of classes, with the same NaN-mean nesting.
    pub fn total_over(&self, classes: &[usize]) -> Option<f64> {
        nan_mean((0..self.slides.len()).map(|s| nan_mean(classes.iter().map(|&c| self.get(s, c)))))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(w, "slide,class,dsc")?;
        for (s, id) in self.slides.iter().enumerate() {
            for c in 0..self.classes {
                writeln!(w, "{id},{c},{}", cell(self.get(s, c)))?;
            }
        }
        for (c, v) in self.per_class.iter().enumerate() {
            writeln!(w, "class_mean,{c},{}", cell(*v))?;
        }
        for (id, v) in self.slides.iter().zip(&self.per_slide) {
            writeln!(w, "slide_mean:{id},,{}", cell(*v))?;
        }
        writeln!(w, "total,,{:.6}", self.total)?;
        Ok(())
    }
}

/// NaN-mean over classes per slide, then over slides.
pub fn aggregate(
    slides: Vec<String>,
    classes: usize,
    table: Vec<Option<f64>>,
) -> Result<DiceReport> {
    if table.len() != slides.len() * classes {
        return Err(Error::shape(
            "aggregate",
            format!(
                "{} entries for {} slides x {classes}",
                table.len(),
                slides.len()
            ),
        ));
    }
    let at = |s: usize, c: usize| table[s * classes + c];
    let per_slide: Vec<Option<f64>> = (0..slides.len())
        .map(|s| nan_mean((0..classes).map(|c| at(s, c))))
        .collect();
    let per_class = (0..classes)
        .map(|c| nan_mean((0..slides.len()).map(|s| at(s, c))))
        .collect();
    let total = nan_mean(per_slide.iter().copied()).ok_or(Error::EmptyEvaluation)?;
    Ok(DiceReport {
        slides,
        classes,
        table,
        per_class,
        per_slide,
        total,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn hand_cases() {
        let gt = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1u8, 1, 0, 0, 1, 1, 0, 0];
        assert_eq!(dsc_class_slide(&pred, &gt, 1).unwrap(), Some(0.5));
        assert_eq!(dsc_class_slide(&gt, &gt, 1).unwrap(), Some(1.0));
        assert_eq!(dsc_class_slide(&gt, &gt, 3).unwrap(), None);
        // Predicted but absent from the reference: defined and zero.
        assert_eq!(dsc_class_slide(&[2, 0], &[0, 0], 2).unwrap(), Some(0.0));
        assert!(dsc_class_slide(&[0], &[0, 1], 0).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let r = aggregate(vec!["a".into()], 3, vec![Some(0.5), None, Some(1.0)]).unwrap();
        assert_eq!(r.total, 0.75);
        let r = aggregate(
            vec!["a".into(), "b".into()],
            2,
            vec![Some(0.5), Some(1.0), Some(0.25), None],
        )
        .unwrap();
        assert_eq!(r.per_slide, vec![Some(0.75), Some(0.25)]);
        assert_eq!(r.total, 0.5);
        assert_eq!(r.per_class, vec![Some(0.375), Some(1.0)]);
        let r = aggregate(vec!["a".into(), "b".into()], 1, vec![Some(0.4), None]).unwrap();
        assert_eq!(r.total, 0.4);
        assert!(matches!(
            aggregate(vec!["a".into()], 2, vec![None, None]),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn micro_average_accumulates_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let patches: Vec<(Vec<u8>, Vec<u8>)> = (0..6)
                .map(|_| {
                    (
                        (0..16).map(|_| rng.gen_range(0..3)).collect(),
                        (0..16).map(|_| rng.gen_range(0..3)).collect(),
                    )
                })
                .collect();
            let pred: Vec<u8> = patches.iter().flat_map(|p| p.0.clone()).collect();
            let gt: Vec<u8> = patches.iter().flat_map(|p| p.1.clone()).collect();
            for c in 0..3 {
                let (mut tp, mut fp, mut fne) = (0, 0, 0);
                for (p, g) in &patches {
                    let (a, b, d) = confusion(p, g, c).unwrap();
                    tp += a;
                    fp += b;
                    fne += d;
                }
                assert_eq!(
                    dsc_class_slide(&pred, &gt, c).unwrap(),
                    dice_from_counts(tp, fp, fne)
                );
            }
        }
    }

    #[test]
    fn csv_layout() {
        let r = aggregate(vec!["s1".into()], 2, vec![Some(1.0), None]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "slide,class,dsc");
        assert_eq!(lines[1], "s1,0,1.000000");
        assert_eq!(lines[2], "s1,1,");
        assert_eq!(*lines.last().unwrap(), "total,,1.000000");
    }
}
