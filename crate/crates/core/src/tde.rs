//! Total direct effect: the full prediction minus a counterfactual prediction
//! made with the visual evidence wiped. Any context bias present in both
//! terms cancels.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TdeInputs {
    pub full_logits: Vec<f64>,
    pub counterfactual_logits: Vec<f64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TdeError {
    #[error("logit length mismatch: full {full}, counterfactual {counterfactual}")]
    LengthMismatch { full: usize, counterfactual: usize },
    #[error("non-finite logit")]
    NonFinite,
}

pub fn tde_scores(inp: &TdeInputs) -> Result<Vec<f64>, TdeError> {
    let (a, b) = (&inp.full_logits, &inp.counterfactual_logits);
    if a.len() != b.len() {
        return Err(TdeError::LengthMismatch {
            full: a.len(),
            counterfactual: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(TdeError::NonFinite);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argmax(xs: &[f64]) -> usize {
        (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
    }

    #[test]
    fn arithmetic() {
        let out = tde_scores(&TdeInputs {
            full_logits: vec![2.0, 1.0],
            counterfactual_logits: vec![1.0, 1.0],
        })
        .unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn length_mismatch() {
        let err = tde_scores(&TdeInputs {
            full_logits: vec![1.0],
            counterfactual_logits: vec![],
        });
        assert_eq!(err, Err(TdeError::LengthMismatch { full: 1, counterfactual: 0 }));
    }

    #[test]
    fn shared_bias_cancels_and_flips_argmax() {
        // "on" dominates through the frequency bias; the visual evidence favours "riding"
        let bias = [5.0, 0.0, 0.0];
        let visual = [0.2, 1.5, 0.1];
        let full: Vec<f64> = bias.iter().zip(&visual).map(|(b, v)| b + v).collect();
        let tde = tde_scores(&TdeInputs {
            full_logits: full.clone(),
            counterfactual_logits: bias.to_vec(),
        })
        .unwrap();
        assert_eq!(argmax(&full), 0);
        assert_eq!(argmax(&tde), 1);
    }
}
