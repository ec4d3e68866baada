use crate::error::{Error, Result};
use crate::nn::log_softmax;

/// Next-token scoring interface shared by every decoder.
///
/// A prefix always begins with [`Scorer::bos`]. Implementations must be
/// pure functions of the prefix so decoders stay deterministic.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;

    fn bos(&self) -> usize;

    /// Token that terminates a hypothesis, if the scorer has one.
    fn eos(&self) -> Option<usize>;

    /// Unnormalized next-token scores.
    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(prefix)?))
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn bos(&self) -> usize {
        (**self).bos()
    }
    fn eos(&self) -> Option<usize> {
        (**self).eos()
    }
    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).logits(prefix)
    }
}

/// Bagging ensemble: the arithmetic mean of member logits.
pub struct EnsembleScorer<S> {
    members: Vec<S>,
}

/// Averages member logits at every step. All members must share the
/// vocabulary and the start and end tokens.
pub fn ensemble_scorer<S: Scorer>(members: Vec<S>) -> Result<EnsembleScorer<S>> {
    let Some(first) = members.first() else {
        return Err(Error::Empty("ensemble members".into()));
    };
    let key = (first.vocab_size(), first.bos(), first.eos());
    if let Some(m) = members
        .iter()
        .find(|m| (m.vocab_size(), m.bos(), m.eos()) != key)
    {
        return Err(Error::LengthMismatch(format!(
            "ensemble member vocabulary {} differs from {}",
            m.vocab_size(),
            key.0
        )));
    }
    Ok(EnsembleScorer { members })
}

impl<S: Scorer> EnsembleScorer<S> {
    pub fn members(&self) -> &[S] {
        &self.members
    }
}

impl<S: Scorer> Scorer for EnsembleScorer<S> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }
    fn bos(&self) -> usize {
        self.members[0].bos()
    }
    fn eos(&self) -> Option<usize> {
        self.members[0].eos()
    }
    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.vocab_size()];
        for m in &self.members {
            let z = m.logits(prefix)?;
            if z.len() != acc.len() {
                return Err(Error::LengthMismatch(format!(
                    "member returned {} logits",
                    z.len()
                )));
            }
            acc.iter_mut().zip(&z).for_each(|(a, x)| *a += x);
        }
        let n = self.members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::toy::{FixedScorer, RandomScorer};

    #[test]
    fn identical_members_match_one() {
        let s = RandomScorer::new(9, 3);
        let e = ensemble_scorer(vec![s.clone(), s.clone()]).unwrap();
        for prefix in [vec![0], vec![0, 4, 2]] {
            assert_eq!(e.log_probs(&prefix).unwrap(), s.log_probs(&prefix).unwrap());
        }
        let three = ensemble_scorer(vec![s.clone(), s.clone(), s.clone()]).unwrap();
        let (a, b) = (
            three.log_probs(&[0, 1]).unwrap(),
            s.log_probs(&[0, 1]).unwrap(),
        );
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn averages_logits_before_normalizing() {
        let a = FixedScorer {
            logits: vec![1.0, 3.0, -2.0],
            bos: 0,
            eos: None,
        };
        let b = FixedScorer {
            logits: vec![0.5, -1.0, 4.0],
            ..a.clone()
        };
        let e = ensemble_scorer(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(e.logits(&[0]).unwrap(), vec![0.75, 1.0, 1.0]);
        assert_eq!(e.log_probs(&[0]).unwrap(), log_softmax(&[0.75, 1.0, 1.0]));
        let swapped = ensemble_scorer(vec![b, a]).unwrap();
        assert_eq!(swapped.logits(&[0]).unwrap(), e.logits(&[0]).unwrap());
    }

    #[test]
    fn permutation_invariant() {
        let members: Vec<RandomScorer> = (0..4).map(|k| RandomScorer::new(7, k)).collect();
        let fwd = ensemble_scorer(members.clone()).unwrap();
        let rev = ensemble_scorer(members.into_iter().rev().collect()).unwrap();
        let (x, y) = (
            fwd.log_probs(&[0, 3]).unwrap(),
            rev.log_probs(&[0, 3]).unwrap(),
        );
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rejects_mismatched_members() {
        assert!(ensemble_scorer(Vec::<RandomScorer>::new()).is_err());
        assert!(ensemble_scorer(vec![RandomScorer::new(5, 0), RandomScorer::new(6, 0)]).is_err());
    }
}
