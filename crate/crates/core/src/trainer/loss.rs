use crate::error::{Error, Result};
use crate::mining::sq_dist;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_p: Vec<f64>,
    pub grad_n: Vec<f64>,
}

/// `max(alpha + d(q, p) - d(q, n), 0)` with squared Euclidean `d`, and its
/// gradients. At and below the hinge all gradients are zero.
pub fn triplet_loss(q: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<TripletLoss> {
    if q.len() != p.len() || q.len() != n.len() {
        return Err(Error::dim(format!(
            "triplet descriptors have lengths {}, {}, {}",
            q.len(),
            p.len(),
            n.len()
        )));
    }
    let loss = alpha + sq_dist(q, p) - sq_dist(q, n);
    if loss <= 0.0 {
        let zero = vec![0.0; q.len()];
        return Ok(TripletLoss {
            loss: 0.0,
            grad_q: zero.clone(),
            grad_p: zero.clone(),
            grad_n: zero,
        });
    }
    let mut grad_q = Vec::with_capacity(q.len());
    let mut grad_p = Vec::with_capacity(q.len());
    let mut grad_n = Vec::with_capacity(q.len());
    for ((&qi, &pi), &ni) in q.iter().zip(p).zip(n) {
        grad_q.push(2.0 * (ni - pi));
        grad_p.push(-2.0 * (qi - pi));
        grad_n.push(2.0 * (qi - ni));
    }
    Ok(TripletLoss {
        loss,
        grad_q,
        grad_p,
        grad_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn satisfied_margin_gives_zero() {
        let r = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 0.1).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r
            .grad_q
            .iter()
            .chain(&r.grad_p)
            .chain(&r.grad_n)
            .all(|&g| g == 0.0));
    }

    #[test]
    fn violated_margin() {
        let r = triplet_loss(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 0.0], 0.1).unwrap();
        assert!((r.loss - 3.1).abs() < 1e-15);
        assert_eq!(r.grad_q, vec![2.0, -4.0]);
        assert_eq!(r.grad_p, vec![0.0, 4.0]);
        assert_eq!(r.grad_n, vec![-2.0, 0.0]);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            triplet_loss(&[0.0], &[0.0, 1.0], &[1.0], 0.1),
            Err(Error::Dimension(_))
        ));
    }
}
