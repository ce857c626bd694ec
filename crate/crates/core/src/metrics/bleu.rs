use std::collections::HashMap;

/// Treatment of zero n-gram precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// `p_n = (matches + 1) / (total + 1)` at every order.
    #[default]
    AddOne,
    /// Plain BLEU: any zero precision yields a score of 0.
    None,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total at order `n`.
pub fn modified_precision_counts<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refr.get(g).copied().unwrap_or(0))).sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matched, total)
}

/// Sentence BLEU on a 0-100 scale with uniform weights over orders
/// `1..=max_n` and add-one smoothing.
pub fn bleu<S: AsRef<str>>(candidate: &[S], reference: &[S], max_n: usize) -> f64 {
    bleu_with(candidate, reference, max_n, Smoothing::AddOne)
}

pub fn bleu_with<S: AsRef<str>>(candidate: &[S], reference: &[S], max_n: usize, smoothing: Smoothing) -> f64 {
    if candidate.is_empty() || max_n == 0 {
        return 0.0;
    }
    let w = 1.0 / max_n as f64;
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = modified_precision_counts(candidate, reference, n);
        let p = match smoothing {
            Smoothing::AddOne => (m as f64 + 1.0) / (t as f64 + 1.0),
            Smoothing::None => {
                if m == 0 {
                    return 0.0;
                }
                m as f64 / t as f64
            }
        };
        log_sum += w * p.ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * log_sum.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_100() {
        let x = t("the app crashes on start up");
        assert!((bleu(&x, &x, 4) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_is_zero() {
        assert_eq!(bleu::<&str>(&[], &t("a b"), 4), 0.0);
    }

    #[test]
    fn no_overlap_determined_by_smoothing_and_bp() {
        // c = r = 4: p_n = 1/(t_n + 1) with t = 4,3,2,1; BP = 1
        let got = bleu(&t("a b c d"), &t("w x y z"), 4);
        let want = 100.0 * ((0.2f64).ln() / 4.0 + (0.25f64).ln() / 4.0 + (1.0f64 / 3.0).ln() / 4.0 + (0.5f64).ln() / 4.0).exp();
        assert!((got - want).abs() < 1e-9);
        assert_eq!(bleu_with(&t("a b c d"), &t("w x y z"), 4, Smoothing::None), 0.0);
    }

    #[test]
    fn clipping() {
        assert_eq!(modified_precision_counts(&t("the the the"), &t("the cat"), 1), (1, 3));
    }
}
