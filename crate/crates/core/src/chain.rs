//! Closed-chain consistency filtering of pairwise registrations.
//!
//! A sequence that returns to its starting view forms a loop of pairwise
//! transforms whose composition must be the identity. Mismatches bias the
//! individual link fits and show up as a loop residual; they are removed
//! greedily, worst transfer error first, keeping only removals that shrink
//! the residual.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::register::{
    count_valid, fit_homography, fit_homography_dlt, symmetric_transfer_error, Homography, Match, MatchSet,
    RansacConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("link {0} has a non-invertible transform")]
    NonInvertibleLink(usize),
    #[error("link {link} has {count} valid matches, need at least {min}")]
    InsufficientMatches { link: usize, count: usize, min: usize },
    #[error("chain has no links")]
    Empty,
}

/// Pairwise transform `T_{i-1,i}` together with the matches it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLink {
    pub h: Homography,
    pub matches: MatchSet,
}

/// Ordered links `T_{0,1}, ..., T_{n-1,n}` followed by the closing `T_{n,0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformChain {
    pub links: Vec<ChainLink>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub loop_tolerance: f64,
    pub min_matches: usize,
    /// Upper bound on accepted removals.
    pub max_removals: usize,
    /// Robust estimator used to rank removal candidates.
    pub ransac: RansacConfig,
    /// Matches closer than this to their link's robust estimate are never removed.
    pub candidate_min_error: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            loop_tolerance: 0.05,
            min_matches: 8,
            max_removals: 10_000,
            ransac: RansacConfig::default(),
            candidate_min_error: 2.0,
        }
    }
}

/// Summary of one filter run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterTrace {
    /// Loop residual after every accepted removal, starting with the initial refit.
    pub residuals: Vec<f64>,
    pub removed: usize,
    pub converged: bool,
}

fn compose(links: impl Iterator<Item = Homography>) -> Result<Matrix3<f64>, ChainError> {
    let mut acc = Matrix3::identity();
    for (i, h) in links.enumerate() {
        if h.inverse().is_none() {
            return Err(ChainError::NonInvertibleLink(i));
        }
        acc = h.matrix() * acc;
        // keep the running product well scaled
        let s = acc[(2, 2)];
        if s.abs() > 1e-300 {
            acc /= s;
        }
    }
    Ok(acc)
}

fn residual_of(hs: &[Homography]) -> Result<f64, ChainError> {
    if hs.is_empty() {
        return Err(ChainError::Empty);
    }
    let c = compose(hs.iter().copied())?;
    let c = if c[(2, 2)].abs() > 1e-300 { c / c[(2, 2)] } else { c };
    Ok((c - Matrix3::identity()).norm())
}

/// Frobenius distance of the normalized loop composition from the identity.
pub fn loop_residual(chain: &TransformChain) -> Result<f64, ChainError> {
    let hs: Vec<Homography> = chain.links.iter().map(|l| l.h).collect();
    residual_of(&hs)
}

fn refit(matches: &[Match]) -> Option<Homography> {
    let (src, dst): (Vec<_>, Vec<_>) = matches.iter().filter(|m| m.valid).map(|m| (m.src, m.dst)).unzip();
    fit_homography_dlt(&src, &dst).ok()
}

/// `(match index, error)` for the valid matches of a link under `h`, worst first.
fn ranked_errors(matches: &[Match], h: &Homography) -> Vec<(usize, f64)> {
    let Some(hi) = h.inverse() else {
        return Vec::new();
    };
    let mut errs: Vec<(usize, f64)> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| m.valid)
        .map(|(i, m)| (i, symmetric_transfer_error(h, &hi, m.src, m.dst)))
        .collect();
    errs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    errs
}

/// Greedy loop-consistency filter. Returns the updated chain and a trace.
pub fn filter_matches_closed_chain_traced(
    chain: &TransformChain,
    cfg: &ChainConfig,
) -> Result<(TransformChain, FilterTrace), ChainError> {
    if chain.links.is_empty() {
        return Err(ChainError::Empty);
    }
    for (i, l) in chain.links.iter().enumerate() {
        let count = count_valid(&l.matches);
        if count < cfg.min_matches {
            return Err(ChainError::InsufficientMatches {
                link: i,
                count,
                min: cfg.min_matches,
            });
        }
    }
    let mut out = chain.clone();
    for (i, l) in out.links.iter_mut().enumerate() {
        l.h = refit(&l.matches).ok_or(ChainError::NonInvertibleLink(i))?;
    }
    let mut hs: Vec<Homography> = out.links.iter().map(|l| l.h).collect();
    let mut residual = residual_of(&hs)?;
    let mut trace = FilterTrace {
        residuals: vec![residual],
        ..FilterTrace::default()
    };

    // Candidates are ranked under a robust re-estimate of each link; the
    // least-squares refits above are what the loop residual composes.
    let mut ranking: Vec<Homography> = out
        .links
        .iter()
        .map(|l| fit_homography(&l.matches, &cfg.ransac).unwrap_or(l.h))
        .collect();

    while residual > cfg.loop_tolerance && trace.removed < cfg.max_removals {
        let mut per_link: Vec<(usize, Vec<(usize, f64)>)> = out
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| (i, ranked_errors(&l.matches, &ranking[i])))
            .collect();
        // links ordered by their worst-case transfer error
        per_link.sort_by(|a, b| {
            let wa = a.1.first().map_or(0.0, |e| e.1);
            let wb = b.1.first().map_or(0.0, |e| e.1);
            wb.total_cmp(&wa).then(a.0.cmp(&b.0))
        });
        if per_link
            .first()
            .is_some_and(|(li, _)| count_valid(&out.links[*li].matches) <= cfg.min_matches)
        {
            break;
        }
        // the worst link's worst match first, then every other match by error
        let mut singles: Vec<(usize, usize, f64)> = per_link
            .iter()
            .filter(|(li, _)| count_valid(&out.links[*li].matches) > cfg.min_matches)
            .flat_map(|(li, errs)| errs.iter().map(move |&(mi, e)| (*li, mi, e)))
            .filter(|c| c.2 > cfg.candidate_min_error)
            .collect();
        if singles.len() > 1 {
            singles[1..].sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        }
        let moves = candidate_moves(&singles, &out, cfg.min_matches);

        let mut accepted = None;
        for mv in moves {
            if let Some(r) = try_move(&mut out, &mut hs, &mv, residual) {
                residual = r;
                accepted = Some(mv);
                break;
            }
        }
        let Some(mv) = accepted else {
            break;
        };
        let mut touched: Vec<usize> = mv.iter().map(|m| m.0).collect();
        touched.dedup();
        for li in touched {
            ranking[li] = fit_homography(&out.links[li].matches, &cfg.ransac).unwrap_or(ranking[li]);
        }
        trace.removed += mv.len();
        trace.residuals.push(residual);
    }
    trace.converged = residual <= cfg.loop_tolerance;
    Ok((out, trace))
}

/// Removal moves in trial order: single matches, then each link's full
/// candidate set, then every candidate at once. Batches never take a link
/// below `min_matches`.
fn candidate_moves(
    singles: &[(usize, usize, f64)],
    chain: &TransformChain,
    min_matches: usize,
) -> Vec<Vec<(usize, usize)>> {
    let mut moves: Vec<Vec<(usize, usize)>> = singles.iter().map(|c| vec![(c.0, c.1)]).collect();
    let mut link_order: Vec<usize> = Vec::new();
    for c in singles {
        if !link_order.contains(&c.0) {
            link_order.push(c.0);
        }
    }
    let budget = |li: usize| count_valid(&chain.links[li].matches).saturating_sub(min_matches);
    let batch_for = |li: usize| -> Vec<(usize, usize)> {
        singles
            .iter()
            .filter(|c| c.0 == li)
            .take(budget(li))
            .map(|c| (c.0, c.1))
            .collect()
    };
    let mut all = Vec::new();
    for &li in &link_order {
        let batch = batch_for(li);
        if batch.len() > 1 {
            moves.push(batch.clone());
        }
        all.extend(batch);
    }
    if link_order.len() > 1 {
        moves.push(all);
    }
    moves
}

/// Applies `mv` if it lowers the loop residual below `current`; otherwise
/// leaves `chain` and `hs` untouched.
fn try_move(chain: &mut TransformChain, hs: &mut [Homography], mv: &[(usize, usize)], current: f64) -> Option<f64> {
    let saved: Vec<Homography> = hs.to_vec();
    for &(li, mi) in mv {
        chain.links[li].matches[mi].valid = false;
    }
    let mut links: Vec<usize> = mv.iter().map(|m| m.0).collect();
    links.sort_unstable();
    links.dedup();
    let mut ok = true;
    for &li in &links {
        match refit(&chain.links[li].matches) {
            Some(h) => hs[li] = h,
            None => ok = false,
        }
    }
    if ok {
        if let Ok(r) = residual_of(hs) {
            if r < current {
                for &li in &links {
                    chain.links[li].h = hs[li];
                }
                return Some(r);
            }
        }
    }
    hs.copy_from_slice(&saved);
    for &(li, mi) in mv {
        chain.links[li].matches[mi].valid = true;
    }
    None
}

pub fn filter_matches_closed_chain(chain: &TransformChain, cfg: &ChainConfig) -> Result<TransformChain, ChainError> {
    filter_matches_closed_chain_traced(chain, cfg).map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    use super::tests_support::synthetic_chain;

    #[test]
    fn identity_links_have_zero_residual() {
        let chain = TransformChain {
            links: vec![
                ChainLink {
                    h: Homography::identity(),
                    matches: vec![]
                };
                4
            ],
        };
        assert_eq!(loop_residual(&chain).unwrap(), 0.0);
    }

    #[test]
    fn exact_loop_has_tiny_residual() {
        let (chain, _) = synthetic_chain(8, 20, 0.0, 1);
        assert!(loop_residual(&chain).unwrap() < 1e-9);
    }

    #[test]
    fn perturbed_link_residual_matches_direct_composition() {
        let (mut chain, _) = synthetic_chain(8, 20, 0.0, 1);
        let bad = chain.links[3].h.then(&Homography::translation(5.0, 0.0)).unwrap();
        chain.links[3].h = bad;
        // direct oracle: plain matrix product without intermediate rescaling
        let mut prod = Matrix3::identity();
        for l in &chain.links {
            prod = l.h.matrix() * prod;
        }
        let expect = (prod / prod[(2, 2)] - Matrix3::identity()).norm();
        let got = loop_residual(&chain).unwrap();
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-9 * (1.0 + expect));
    }

    #[test]
    fn noiseless_chain_untouched() {
        let (chain, _) = synthetic_chain(8, 24, 0.0, 2);
        let (out, trace) = filter_matches_closed_chain_traced(&chain, &ChainConfig::default()).unwrap();
        assert_eq!(trace.removed, 0);
        assert!(trace.converged);
        assert!(out.links.iter().all(|l| l.matches.iter().all(|m| m.valid)));
    }

    #[test]
    fn outliers_are_filtered() {
        let (chain, labels) = synthetic_chain(8, 40, 0.3, 5);
        let (out, trace) = filter_matches_closed_chain_traced(&chain, &ChainConfig::default()).unwrap();
        let (mut out_total, mut out_killed, mut in_total, mut in_killed) = (0, 0, 0, 0);
        for (l, lab) in out.links.iter().zip(&labels) {
            for (m, &is_out) in l.matches.iter().zip(lab) {
                if is_out {
                    out_total += 1;
                    out_killed += usize::from(!m.valid);
                } else {
                    in_total += 1;
                    in_killed += usize::from(!m.valid);
                }
            }
        }
        assert!(out_killed as f64 >= 0.9 * out_total as f64, "{out_killed}/{out_total}");
        assert!(in_killed as f64 <= 0.05 * in_total as f64, "{in_killed}/{in_total}");
        assert!(trace.converged, "final residual {:?}", trace.residuals.last());
        assert!(trace.residuals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn filter_is_idempotent_after_convergence() {
        let (chain, _) = synthetic_chain(6, 30, 0.25, 9);
        let cfg = ChainConfig::default();
        let (once, trace) = filter_matches_closed_chain_traced(&chain, &cfg).unwrap();
        assert!(trace.converged);
        let (twice, trace2) = filter_matches_closed_chain_traced(&once, &cfg).unwrap();
        assert_eq!(trace2.removed, 0);
        for (a, b) in once.links.iter().zip(&twice.links) {
            assert_eq!(a.matches, b.matches);
        }
    }

    #[test]
    fn too_few_matches_is_an_error() {
        let (mut chain, _) = synthetic_chain(4, 7, 0.0, 3);
        chain.links[0].matches.truncate(7);
        assert!(matches!(
            filter_matches_closed_chain(&chain, &ChainConfig::default()),
            Err(ChainError::InsufficientMatches { link: 0, count: 7, .. })
        ));
    }
}
