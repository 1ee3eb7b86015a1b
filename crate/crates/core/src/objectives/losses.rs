use crate::data::{Batch, Targets, TaskType};
use crate::error::{Error, Result};
use crate::model::ColumnPredictions;
use crate::tensor::{Float, Graph, Var};

/// Guard added to squared norms before cosine normalization.
const NORM_EPS: f64 = 1e-12;

/// Mean of `values` weighted by a 0/1 `weights` constant of the same shape.
fn weighted_mean<F: Float>(g: &mut Graph<F>, values: Var, weights: Option<Vec<F>>) -> Result<Var> {
    match weights {
        None => Ok(g.mean(values)),
        Some(w) => {
            let total: f64 = w.iter().map(|v| v.as_f64()).sum();
            let shape = g.shape(values).to_vec();
            let w = g.constant_from(shape, w)?;
            let wv = g.mul(values, w)?;
            let s = g.sum(wv);
            Ok(g.scale(s, 1.0 / total.max(1.0)))
        }
    }
}

/// Per-column reconstruction loss of the clean batch `target`.
///
/// Numerical columns use squared error, categorical columns cross-entropy.
/// Each group is averaged over its columns and the batch, and the two
/// averages are added. With `mask` (row-major `[B, c]`, token order) only
/// resampled cells count.
pub fn reconstruction_loss<F: Float>(
    g: &mut Graph<F>,
    preds: &ColumnPredictions,
    target: &Batch,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (b, nn, nc) = (target.len(), target.n_num, target.n_cat);
    let c = nn + nc;
    if preds.cat.len() != nc || preds.num.is_some() != (nn > 0) {
        return Err(Error::Usage("reconstruction heads do not match the batch columns".into()));
    }
    if mask.is_some_and(|m| m.len() != b * c) {
        return Err(Error::Usage(format!("mask needs {} entries", b * c)));
    }
    let weight = |r: usize, j: usize| F::of(f64::from(u8::from(mask.is_none_or(|m| m[r * c + j]))));
    let mut terms = Vec::with_capacity(2);

    if let Some(pred) = preds.num {
        let mut x = Vec::with_capacity(nn * b);
        for k in 0..nn {
            x.extend((0..b).map(|r| F::of(target.num[r * nn + k])));
        }
        let x = g.constant_from(vec![nn, b, 1], x)?;
        let diff = g.sub(pred, x)?;
        let sq = g.mul(diff, diff)?;
        let w = mask.map(|_| (0..nn).flat_map(|k| (0..b).map(move |r| (r, k))).map(|(r, k)| weight(r, k)).collect());
        terms.push(weighted_mean(g, sq, w)?);
    }

    if nc > 0 {
        let mut per_column = Vec::with_capacity(nc);
        for (j, &logits) in preds.cat.iter().enumerate() {
            let labels: Vec<usize> = (0..b).map(|r| target.cat[r * nc + j]).collect();
            let lsm = g.log_softmax(logits)?;
            let picked = g.pick(lsm, &labels)?;
            let nll = g.scale(picked, -1.0);
            let w = mask.map(|_| (0..b).map(|r| weight(r, nn + j)).collect());
            per_column.push(weighted_mean(g, nll, w)?);
        }
        let mut sum = per_column[0];
        for &v in &per_column[1..] {
            sum = g.add(sum, v)?;
        }
        terms.push(g.scale(sum, 1.0 / nc as f64));
    }

    match terms[..] {
        [one] => Ok(one),
        [a, b] => g.add(a, b),
        _ => Err(Error::Usage("reconstruction needs at least one column".into())),
    }
}

fn l2_normalize<F: Float>(g: &mut Graph<F>, z: Var) -> Result<Var> {
    let [b, _] = g.shape(z)[..] else {
        return Err(Error::Shape(format!("embeddings must be [B, z], got {:?}", g.shape(z))));
    };
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.add_scalar(ss, NORM_EPS);
    let norm = g.sqrt(ss)?;
    let norm = g.reshape(norm, &[b, 1])?;
    g.div(z, norm)
}

fn diagonal_nll<F: Float>(g: &mut Graph<F>, s: Var) -> Result<Var> {
    let b = g.shape(s)[0];
    let lsm = g.log_softmax(s)?;
    let diag = g.pick(lsm, &(0..b).collect::<Vec<_>>())?;
    let m = g.mean(diag);
    Ok(g.scale(m, -1.0))
}

/// Symmetric InfoNCE with cosine similarity and temperature `tau`.
///
/// Row `i` of `z` and of `z_tilde` form the positive pair; every other row
/// of the opposite view is a negative.
pub fn infonce_loss<F: Float>(g: &mut Graph<F>, z: Var, z_tilde: Var, tau: f64) -> Result<Var> {
    if g.shape(z) != g.shape(z_tilde) {
        return Err(Error::Shape(format!("view shapes differ: {:?} vs {:?}", g.shape(z), g.shape(z_tilde))));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let a = l2_normalize(g, z)?;
    let b = l2_normalize(g, z_tilde)?;
    let bt = g.transpose(b, 0, 1)?;
    let s = g.matmul(a, bt)?;
    let s = g.scale(s, 1.0 / tau);
    let forward = diagonal_nll(g, s)?;
    let st = g.transpose(s, 0, 1)?;
    let backward = diagonal_nll(g, st)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, 0.5))
}

/// Task loss on head outputs `[B, n_outputs]`.
///
/// Regression: squared error to standardized labels. Binary: logistic
/// cross-entropy on a single logit. Multiclass: softmax cross-entropy.
pub fn supervised_loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &Targets, task: TaskType) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [b, width] = shape[..] else {
        return Err(Error::Shape(format!("logits must be [B, outputs], got {shape:?}")));
    };
    if targets.len() != b {
        return Err(Error::Usage(format!("{} labels for {b} predictions", targets.len())));
    }
    match (task, targets) {
        (TaskType::Regression, Targets::Regression(y)) if width == 1 => {
            let pred = g.reshape(logits, &[b])?;
            let y = g.constant_from(vec![b], y.iter().map(|&v| F::of(v)).collect())?;
            let diff = g.sub(pred, y)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
        (TaskType::Binary, Targets::Classes { labels, n_classes: 2 }) if width == 1 => {
            let z = g.reshape(logits, &[b])?;
            let y = g.constant_from(vec![b], labels.iter().map(|&l| F::of(l as f64)).collect())?;
            let sp = g.softplus(z)?;
            let yz = g.mul(y, z)?;
            let per_row = g.sub(sp, yz)?;
            Ok(g.mean(per_row))
        }
        (TaskType::Multiclass, Targets::Classes { labels, n_classes }) if width == *n_classes => {
            let lsm = g.log_softmax(logits)?;
            let picked = g.pick(lsm, labels)?;
            let m = g.mean(picked);
            Ok(g.scale(m, -1.0))
        }
        _ => Err(Error::Usage(format!("labels do not match a {} task with {width} outputs", task.as_str()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.scalar_value(v).unwrap()
    }

    #[test]
    fn binary_zero_logit_is_ln2() {
        for labels in [vec![0, 0], vec![1, 0], vec![1, 1]] {
            let mut g = Graph::<f64>::eval();
            let z = g.constant_from(vec![2, 1], vec![0.0, 0.0]).unwrap();
            let t = Targets::Classes { labels, n_classes: 2 };
            let l = supervised_loss(&mut g, z, &t, TaskType::Binary).unwrap();
            assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_multiclass_is_ln3_and_confident_is_near_zero() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let t = Targets::Classes { labels: vec![0, 2], n_classes: 3 };
        let l = supervised_loss(&mut g, z, &t, TaskType::Multiclass).unwrap();
        assert!((scalar(&g, l) - 3f64.ln()).abs() < 1e-15);
        let z = g.constant_from(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
        let l = supervised_loss(&mut g, z, &t, TaskType::Multiclass).unwrap();
        assert!(scalar(&g, l) < 1e-20);
        let z = g.constant_from(vec![2, 1], vec![60.0, -60.0]).unwrap();
        let t = Targets::Classes { labels: vec![1, 0], n_classes: 2 };
        let l = supervised_loss(&mut g, z, &t, TaskType::Binary).unwrap();
        assert!(scalar(&g, l) < 1e-20);
    }

    #[test]
    fn label_task_mismatch_is_an_error() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant_from(vec![2, 1], vec![0.0; 2]).unwrap();
        let t = Targets::Regression(vec![0.0, 1.0]);
        assert!(supervised_loss(&mut g, z, &t, TaskType::Binary).is_err());
        let t = Targets::Classes { labels: vec![0, 1], n_classes: 3 };
        assert!(supervised_loss(&mut g, z, &t, TaskType::Multiclass).is_err());
    }

    #[test]
    fn regression_is_mse() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant_from(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let t = Targets::Regression(vec![1.0, 0.0, 0.0]);
        let l = supervised_loss(&mut g, z, &t, TaskType::Regression).unwrap();
        assert!((scalar(&g, l) - 13.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant_from(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let zt = g.constant_from(vec![1, 3], vec![-1.0, 0.5, 0.0]).unwrap();
        let l = infonce_loss(&mut g, z, zt, 1.0).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn infonce_orthogonal_views_at_low_temperature_vanish() {
        let mut g = Graph::<f64>::eval();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let z = g.constant_from(vec![4, 4], eye.clone()).unwrap();
        let zt = g.constant_from(vec![4, 4], eye).unwrap();
        let l = infonce_loss(&mut g, z, zt, 0.01).unwrap();
        assert!(scalar(&g, l) < 1e-30);
    }

    #[test]
    fn infonce_handles_zero_embeddings() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let zt = g.constant_from(vec![2, 3], vec![1.0; 6]).unwrap();
        let l = infonce_loss(&mut g, z, zt, 1.0).unwrap();
        assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-12);
    }

    fn batch(num: Vec<f64>, cat: Vec<usize>, b: usize, nn: usize, nc: usize) -> Batch {
        Batch { rows: (0..b).collect(), n_num: nn, n_cat: nc, num, cat, targets: Targets::Regression(vec![0.0; b]) }
    }

    #[test]
    fn reconstruction_closed_forms() {
        // Uniform logits over 4 categories.
        let mut g = Graph::<f64>::eval();
        let logits = g.constant_from(vec![3, 4], vec![0.0; 12]).unwrap();
        let preds = ColumnPredictions { num: None, cat: vec![logits] };
        let l = reconstruction_loss(&mut g, &preds, &batch(vec![], vec![0, 3, 2], 3, 0, 1), None).unwrap();
        assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-15);

        // Exact numerical predictions plus one uniform categorical column.
        let mut g = Graph::<f64>::eval();
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let pred = g.constant_from(vec![2, 2, 1], vec![0.5, 2.0, -1.0, 0.25]).unwrap();
        let logits = g.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let preds = ColumnPredictions { num: Some(pred), cat: vec![logits] };
        let l = reconstruction_loss(&mut g, &preds, &batch(x, vec![1, 2], 2, 2, 1), None).unwrap();
        assert!((scalar(&g, l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_of_standardized_data_from_zero_is_about_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, nn) = (4000, 3);
        let mut x: Vec<f64> = (0..b * nn).map(|_| rng.random_range(-1.0..1.0)).collect();
        for k in 0..nn {
            let col: Vec<f64> = (0..b).map(|r| x[r * nn + k]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64).sqrt();
            (0..b).for_each(|r| x[r * nn + k] = (x[r * nn + k] - m) / s);
        }
        let mut g = Graph::<f64>::eval();
        let pred = g.constant_from(vec![nn, b, 1], vec![0.0; nn * b]).unwrap();
        let preds = ColumnPredictions { num: Some(pred), cat: vec![] };
        let l = reconstruction_loss(&mut g, &preds, &batch(x, vec![], b, nn, 0), None).unwrap();
        assert!((scalar(&g, l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_reconstruction_ignores_clean_cells() {
        let mut g = Graph::<f64>::eval();
        let pred = g.constant_from(vec![1, 2, 1], vec![1.0, 5.0]).unwrap();
        let preds = ColumnPredictions { num: Some(pred), cat: vec![] };
        let tgt = batch(vec![0.0, 0.0], vec![], 2, 1, 0);
        let l = reconstruction_loss(&mut g, &preds, &tgt, Some(&[true, false])).unwrap();
        assert_eq!(scalar(&g, l), 1.0);
        let l = reconstruction_loss(&mut g, &preds, &tgt, None).unwrap();
        assert_eq!(scalar(&g, l), 13.0);
    }
}
