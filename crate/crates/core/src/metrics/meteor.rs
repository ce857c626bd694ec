use rust_stemmers::{Algorithm, Stemmer};

/// METEOR weights: `F = P*R / (alpha*P + (1-alpha)*R)` and
/// `penalty = gamma * (chunks / matches)^beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams { alpha: 0.9, beta: 3.0, gamma: 0.5 }
    }
}

/// Word alignment between candidate and reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// `cand_to_ref[i] = Some(j)` when candidate token `i` is matched to
    /// reference token `j`.
    pub cand_to_ref: Vec<Option<usize>>,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.cand_to_ref.iter().flatten().count()
    }

    /// Maximal runs of matches that are contiguous in both sentences.
    pub fn chunks(&self) -> usize {
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for (i, m) in self.cand_to_ref.iter().enumerate() {
            if let Some(j) = *m {
                let continues = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                if !continues {
                    chunks += 1;
                }
                prev = Some((i, j));
            }
        }
        chunks
    }
}

#[allow(clippy::needless_range_loop)]
fn align_stage(cand_keys: &[String], ref_keys: &[String], al: &mut Alignment, ref_used: &mut [bool]) {
    for i in 0..cand_keys.len() {
        if al.cand_to_ref[i].is_some() {
            continue;
        }
        let key = &cand_keys[i];
        let preferred = i
            .checked_sub(1)
            .and_then(|p| al.cand_to_ref[p])
            .map(|j| j + 1)
            .filter(|&j| j < ref_keys.len() && !ref_used[j] && ref_keys[j] == *key);
        let pick = preferred.or_else(|| (0..ref_keys.len()).find(|&j| !ref_used[j] && ref_keys[j] == *key));
        if let Some(j) = pick {
            al.cand_to_ref[i] = Some(j);
            ref_used[j] = true;
        }
    }
}

/// Exact matching, then Porter-stem matching on what is left. Each stage
/// scans the candidate left to right and prefers the reference position
/// right after the previous token's match, which keeps identical or
/// monotone sentences in one chunk.
pub fn align<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Alignment {
    let mut al = Alignment { cand_to_ref: vec![None; candidate.len()] };
    let mut ref_used = vec![false; reference.len()];
    let exact = |xs: &[S]| xs.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>();
    align_stage(&exact(candidate), &exact(reference), &mut al, &mut ref_used);

    let stemmer = Stemmer::create(Algorithm::English);
    let stems = |xs: &[S]| xs.iter().map(|s| stemmer.stem(s.as_ref()).into_owned()).collect::<Vec<_>>();
    align_stage(&stems(candidate), &stems(reference), &mut al, &mut ref_used);
    al
}

pub fn meteor<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    meteor_with(candidate, reference, MeteorParams::default())
}

pub fn meteor_with<S: AsRef<str>>(candidate: &[S], reference: &[S], p: MeteorParams) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let al = align(candidate, reference);
    let m = al.matches();
    if m == 0 {
        return 0.0;
    }
    let precision = m as f64 / candidate.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let f = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall);
    let penalty = p.gamma * (al.chunks() as f64 / m as f64).powf(p.beta);
    f * (1.0 - penalty)
}
