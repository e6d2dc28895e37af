//! The metric computations. Everything here is pure: trials draw their
//! randomness from per-(pair, trial) streams, so results are independent
//! of evaluation order.

use ndarray::Array2;
use rand::seq::index;

use crate::data::Image;
use crate::eval::{checked_probabilities, top_class, ClassifierOracle};
use crate::rng::stream;
use crate::{Error, Result};

/// Identification accuracy: can the correct class be told apart from
/// n-1 random distractors using the oracle's scores on the generated
/// image? One trial per (pair, repeat); returns the success fraction.
pub fn nway_topk_accuracy<O: ClassifierOracle + ?Sized>(
    generated: &[Image],
    ground_truth: &[Image],
    oracle: &O,
    n: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let classes = oracle.num_classes();
    if generated.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} generated images against {} references",
            generated.len(),
            ground_truth.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::Degenerate("identification needs at least one pair".into()));
    }
    if n == 0 || n > classes {
        return Err(Error::config(format!(
            "way count {n} outside [1, {classes}]"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k {k} outside [1, {n}]")));
    }
    if trials == 0 {
        return Err(Error::config("identification needs at least one trial"));
    }

    let mut successes = 0usize;
    for (i, (gen, truth)) in generated.iter().zip(ground_truth.iter()).enumerate() {
        let truth_probs = checked_probabilities(oracle, truth)?;
        let target = top_class(&truth_probs);
        let gen_probs = checked_probabilities(oracle, gen)?;
        for trial in 0..trials {
            let mut rng = stream(seed, "eval.nway", &[i as u64, trial as u64]);
            let candidates = draw_candidates(target, classes, n, &mut rng);
            if candidate_rank(&gen_probs, &candidates, target) < k {
                successes += 1;
            }
        }
    }
    Ok(successes as f64 / (generated.len() * trials) as f64)
}

/// The target plus n-1 distinct distractor classes.
fn draw_candidates(
    target: usize,
    classes: usize,
    n: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<usize> {
    let mut candidates = Vec::with_capacity(n);
    candidates.push(target);
    if n > 1 {
        // Sample from the class set with the target removed, then shift
        // indices at or above it back up.
        for d in index::sample(rng, classes - 1, n - 1) {
            candidates.push(if d >= target { d + 1 } else { d });
        }
    }
    candidates
}

/// Position of the target when candidates are ranked by score, higher
/// first, ties to the lower class index.
fn candidate_rank(probs: &[f64], candidates: &[usize], target: usize) -> usize {
    let mut ranked: Vec<usize> = candidates.to_vec();
    ranked.sort_by(|a, b| {
        probs[*b]
            .partial_cmp(&probs[*a])
            .expect("finite probabilities")
            .then(a.cmp(b))
    });
    ranked.iter().position(|c| *c == target).expect("target is a candidate")
}

/// Mean squared error over all pixel channels.
pub fn pixel_mse(generated: &Image, ground_truth: &Image) -> Result<f64> {
    if generated.h != ground_truth.h || generated.w != ground_truth.w {
        return Err(Error::shape(format!(
            "image {}x{} against {}x{}",
            generated.h, generated.w, ground_truth.h, ground_truth.w
        )));
    }
    let mut sum = 0.0;
    for (a, b) in generated.data.iter().zip(ground_truth.data.iter()) {
        let d = *a as f64 - *b as f64;
        sum += d * d;
    }
    Ok(sum / generated.data.len() as f64)
}

/// Agreement of repeated samplings: for each input, the fraction of
/// sampling pairs whose oracle top-1 classes match. Returns the mean and
/// population standard deviation over inputs.
pub fn sampling_consistency<O: ClassifierOracle + ?Sized>(
    samples_per_input: &[Vec<Image>],
    oracle: &O,
) -> Result<(f64, f64)> {
    if samples_per_input.is_empty() {
        return Err(Error::Degenerate("consistency needs at least one input".into()));
    }
    let mut agreements = Vec::with_capacity(samples_per_input.len());
    for samplings in samples_per_input {
        if samplings.len() < 2 {
            return Err(Error::config(
                "consistency needs at least two samplings per input",
            ));
        }
        let mut classes = Vec::with_capacity(samplings.len());
        for img in samplings {
            classes.push(top_class(&checked_probabilities(oracle, img)?));
        }
        let mut same = 0usize;
        let mut total = 0usize;
        for a in 0..classes.len() {
            for b in a + 1..classes.len() {
                total += 1;
                if classes[a] == classes[b] {
                    same += 1;
                }
            }
        }
        agreements.push(same as f64 / total as f64);
    }
    let mean = agreements.iter().sum::<f64>() / agreements.len() as f64;
    let var = agreements.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
        / agreements.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// |mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)), clamped at zero.
pub fn fid(features_real: &Array2<f64>, features_gen: &Array2<f64>) -> Result<f64> {
    if features_real.ncols() != features_gen.ncols() {
        return Err(Error::shape(format!(
            "feature widths {} and {} differ",
            features_real.ncols(),
            features_gen.ncols()
        )));
    }
    if features_real.nrows() < 2 || features_gen.nrows() < 2 {
        return Err(Error::Degenerate(
            "covariance needs at least two feature vectors per side".into(),
        ));
    }
    let (mu1, c1) = gaussian_fit(features_real);
    let (mu2, c2) = gaussian_fit(features_gen);

    let mean_term: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace1: f64 = (0..c1.nrows()).map(|i| c1[[i, i]]).sum();
    let trace2: f64 = (0..c2.nrows()).map(|i| c2[[i, i]]).sum();
    let cross = sqrtm_trace(&c1, &c2)?;
    Ok((mean_term + trace1 + trace2 - 2.0 * cross).max(0.0))
}

/// Mean and unbiased covariance of feature rows.
fn gaussian_fit(x: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut mu = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mu.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = Array2::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                cov[[i, j]] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[[i, j]] / (n - 1) as f64;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    (mu, cov)
}

/// tr((C1 C2)^(1/2)) computed through the symmetric form
/// (S2 C1 S2)^(1/2) with S2 = C2^(1/2); the two share eigenvalues.
/// Negative eigenvalues from numerical noise are clamped at zero.
pub fn sqrtm_trace(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<f64> {
    let s2 = crate::stats::sym_sqrt(c2)?;
    let inner = s2.dot(c1).dot(&s2);
    let n = inner.nrows();
    let sym = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (inner[[i, j]] + inner[[j, i]]));
    let (eigs, _) = crate::stats::sym_eig(&sym)?;
    Ok(eigs.iter().map(|e| e.max(0.0).sqrt()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_class_image;
    use crate::eval::RandomOracle;
    use crate::graph::Real;
    use crate::params::normal_init;
    use approx::assert_abs_diff_eq;

    /// Deterministic oracle keyed on mean pixel intensity bins.
    struct BrightnessOracle {
        classes: usize,
    }

    impl ClassifierOracle for BrightnessOracle {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn probabilities(&self, image: &Image) -> Result<Vec<f64>> {
            let mean: f64 =
                image.data.iter().map(|v| *v as f64).sum::<f64>() / image.data.len() as f64;
            let bin = ((mean * self.classes as f64) as usize).min(self.classes - 1);
            let mut probs = vec![0.0; self.classes];
            // Peaked but smooth, so ranks are informative.
            for (c, p) in probs.iter_mut().enumerate() {
                let d = (c as f64 - bin as f64).abs();
                *p = (-d).exp();
            }
            let z: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= z;
            }
            Ok(probs)
        }

        fn features(&self, image: &Image) -> Result<Vec<f64>> {
            Ok(image.data.iter().take(4).map(|v| *v as f64).collect())
        }
    }

    fn test_images(count: usize, seed: u64) -> Vec<Image> {
        (0..count)
            .map(|i| {
                let mut r = crate::rng::stream(seed, "metrics.test", &[i as u64]);
                let mut img = Image::new(8, 8);
                for v in &mut img.data {
                    *v = (f32::standard_normal(&mut r) * 0.25 + 0.5).clamp(0.0, 1.0);
                }
                img
            })
            .collect()
    }

    #[test]
    fn identical_images_identify_perfectly() {
        let imgs: Vec<Image> = (0..4).map(|c| render_class_image(c, 16)).collect();
        let oracle = BrightnessOracle { classes: 8 };
        for (n, k) in [(2, 1), (5, 1), (8, 3)] {
            let acc =
                nway_topk_accuracy(&imgs, &imgs, &oracle, n, k, 20, 42).unwrap();
            assert_eq!(acc, 1.0, "n={n} k={k}");
        }
    }

    #[test]
    fn one_way_identification_is_trivially_perfect() {
        let imgs = test_images(3, 1);
        let other = test_images(3, 2);
        let oracle = BrightnessOracle { classes: 5 };
        let acc = nway_topk_accuracy(&other, &imgs, &oracle, 1, 1, 10, 7).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_oracle_hits_chance_level() {
        // One trial per pair: scores are drawn fresh for every pair, so
        // successes are independent and the binomial band is exact. Many
        // trials on one pair would share that pair's score vector and
        // correlate.
        let pairs = 10_000;
        let imgs = vec![Image::new(1, 1); pairs];
        let oracle = RandomOracle::new(50, 99);
        for n in [2usize, 10] {
            let acc = nway_topk_accuracy(&imgs, &imgs, &oracle, n, 1, 1, 5).unwrap();
            let p = 1.0 / n as f64;
            let sigma = (p * (1.0 - p) / pairs as f64).sqrt();
            assert!(
                (acc - p).abs() < 3.0 * sigma,
                "n={n}: {acc} vs {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn accuracy_is_monotone_in_k() {
        let gen = test_images(6, 4);
        let truth = test_images(6, 5);
        let oracle = BrightnessOracle { classes: 10 };
        let n = 6;
        let mut prev = 0.0;
        for k in 1..=n {
            let acc = nway_topk_accuracy(&gen, &truth, &oracle, n, k, 50, 11).unwrap();
            assert!(acc >= prev, "k={k}: {acc} < {prev}");
            prev = acc;
        }
        assert_eq!(prev, 1.0, "top-n over n candidates always succeeds");
    }

    #[test]
    fn matches_independent_reimplementation() {
        let gen = test_images(5, 6);
        let truth = test_images(5, 7);
        let oracle = BrightnessOracle { classes: 12 };
        let (n, k, trials, seed) = (6, 2, 20, 13);
        let fast = nway_topk_accuracy(&gen, &truth, &oracle, n, k, trials, seed).unwrap();

        // Second path: same candidate streams, success decided by counting
        // strictly-better and tied-but-lower candidates instead of sorting.
        let mut successes = 0usize;
        for (i, (g, t)) in gen.iter().zip(truth.iter()).enumerate() {
            let tp = oracle.probabilities(t).unwrap();
            let target = top_class(&tp);
            let gp = oracle.probabilities(g).unwrap();
            for trial in 0..trials {
                let mut rng = crate::rng::stream(seed, "eval.nway", &[i as u64, trial as u64]);
                let candidates = draw_candidates(target, oracle.num_classes(), n, &mut rng);
                let mut ahead = 0usize;
                for c in &candidates {
                    if *c == target {
                        continue;
                    }
                    if gp[*c] > gp[target] || (gp[*c] == gp[target] && *c < target) {
                        ahead += 1;
                    }
                }
                if ahead < k {
                    successes += 1;
                }
            }
        }
        let slow = successes as f64 / (gen.len() * trials) as f64;
        assert_eq!(fast, slow);
    }

    #[test]
    fn nway_rejects_bad_parameters() {
        let imgs = test_images(2, 8);
        let oracle = BrightnessOracle { classes: 4 };
        assert!(nway_topk_accuracy(&imgs, &imgs, &oracle, 5, 1, 10, 1).is_err());
        assert!(nway_topk_accuracy(&imgs, &imgs, &oracle, 0, 1, 10, 1).is_err());
        assert!(nway_topk_accuracy(&imgs, &imgs, &oracle, 3, 4, 10, 1).is_err());
        assert!(nway_topk_accuracy(&imgs, &imgs, &oracle, 3, 0, 10, 1).is_err());
        assert!(nway_topk_accuracy(&imgs, &imgs, &oracle, 3, 1, 0, 1).is_err());
        assert!(nway_topk_accuracy(&imgs[..1], &imgs, &oracle, 3, 1, 10, 1).is_err());
        let none: Vec<Image> = Vec::new();
        assert!(nway_topk_accuracy(&none, &none, &oracle, 3, 1, 10, 1).is_err());
    }

    #[test]
    fn pixel_mse_matches_loop_oracle() {
        let a = test_images(1, 20).remove(0);
        let b = test_images(1, 21).remove(0);
        assert_eq!(pixel_mse(&a, &a).unwrap(), 0.0);

        let zeros = Image::new(4, 4);
        let mut ones = Image::new(4, 4);
        for v in &mut ones.data {
            *v = 1.0;
        }
        assert_eq!(pixel_mse(&zeros, &ones).unwrap(), 1.0);

        let got = pixel_mse(&a, &b).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..a.h {
            for x in 0..a.w {
                let pa = a.pixel(y, x);
                let pb = b.pixel(y, x);
                for c in 0..3 {
                    sum += (pa[c] as f64 - pb[c] as f64).powi(2);
                    count += 1;
                }
            }
        }
        assert_abs_diff_eq!(got, sum / count as f64, epsilon = 1e-12);

        let small = Image::new(2, 2);
        assert!(pixel_mse(&a, &small).is_err());
    }

    #[test]
    fn consistency_of_identical_samplings_is_perfect() {
        let img = render_class_image(2, 16);
        let inputs = vec![vec![img.clone(); 5], vec![img; 5]];
        let oracle = BrightnessOracle { classes: 6 };
        let (mean, std) = sampling_consistency(&inputs, &oracle).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn consistency_rejects_single_samplings() {
        let img = render_class_image(0, 16);
        let oracle = BrightnessOracle { classes: 6 };
        assert!(sampling_consistency(&[vec![img]], &oracle).is_err());
        assert!(sampling_consistency(&[], &oracle).is_err());
    }

    #[test]
    fn random_classification_agreement_hits_chance() {
        let classes = 4usize;
        let oracle = RandomOracle::new(classes, 123);
        let inputs: Vec<Vec<Image>> = (0..1000)
            .map(|_| vec![Image::new(2, 2); 5])
            .collect();
        let (mean, _) = sampling_consistency(&inputs, &oracle).unwrap();
        let p = 1.0 / classes as f64;
        // Pairwise agreement indicators are uncorrelated here, so the
        // standard error follows p(1-p)/10 per input.
        let sigma = (p * (1.0 - p) / 10.0 / 1000.0).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * sigma,
            "{mean} vs {p} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut r = crate::rng::stream(30, "fid.test", &[]);
        let x: Array2<f64> = normal_init(&mut r, 40, 5, 1.0);
        let d = fid(&x, &x.clone()).unwrap();
        assert!(d.abs() < 1e-6, "fid {d}");
    }

    #[test]
    fn fid_of_point_masses_is_the_mean_gap() {
        let a = Array2::from_shape_fn((3, 4), |(_, j)| j as f64);
        let b = Array2::from_shape_fn((3, 4), |(_, j)| j as f64 + 2.0);
        let d = fid(&a, &b).unwrap();
        assert_abs_diff_eq!(d, 16.0, epsilon = 1e-9);
    }

    #[test]
    fn fid_matches_analytic_gaussian_within_five_percent() {
        let shift = [1.0, 0.5, 0.0, -0.5];
        let expect: f64 = shift.iter().map(|d| d * d).sum();
        let n = 10_000;
        let mut r = crate::rng::stream(31, "fid.gauss", &[]);
        let a: Array2<f64> = normal_init(&mut r, n, 4, 1.0);
        let mut b: Array2<f64> = normal_init(&mut r, n, 4, 1.0);
        for mut row in b.rows_mut() {
            for (v, d) in row.iter_mut().zip(shift.iter()) {
                *v += d;
            }
        }
        let d = fid(&a, &b).unwrap();
        assert!(
            (d - expect).abs() / expect < 0.05,
            "fid {d} vs analytic {expect}"
        );
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let mut r = crate::rng::stream(32, "fid.sym", &[]);
        let a: Array2<f64> = normal_init(&mut r, 25, 6, 1.0);
        let b: Array2<f64> = normal_init(&mut r, 30, 6, 2.0);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-8);
        assert!(ab >= 0.0);

        let skinny: Array2<f64> = normal_init(&mut r, 3, 6, 1e-8);
        let close = fid(&skinny, &skinny.clone()).unwrap();
        assert!(close >= 0.0);
    }

    #[test]
    fn fid_rejects_mismatched_or_tiny_inputs() {
        let a: Array2<f64> = Array2::zeros((5, 3));
        let b: Array2<f64> = Array2::zeros((5, 4));
        assert!(fid(&a, &b).is_err());
        let single: Array2<f64> = Array2::zeros((1, 3));
        let other: Array2<f64> = Array2::zeros((5, 3));
        assert!(fid(&single, &other).is_err());
    }

    #[test]
    fn sqrtm_trace_of_diagonal_product_is_closed_form() {
        // (C1 C2)^(1/2) of diagonals diag(4,9) and diag(1,4): trace 2 + 6.
        let c1 = Array2::from_shape_vec((2, 2), vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let c2 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        assert_abs_diff_eq!(sqrtm_trace(&c1, &c2).unwrap(), 8.0, epsilon = 1e-10);

        // With itself: trace of the matrix back.
        let mut r = crate::rng::stream(33, "sqrtm.test", &[]);
        let x: Array2<f64> = normal_init(&mut r, 12, 4, 1.0);
        let (_, cov) = gaussian_fit(&x);
        let tr: f64 = (0..4).map(|i| cov[[i, i]]).sum();
        assert_abs_diff_eq!(sqrtm_trace(&cov, &cov).unwrap(), tr, epsilon = 1e-9);
    }
}
