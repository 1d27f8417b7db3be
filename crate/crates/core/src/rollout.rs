//! Attention rollout over encoder self-attention and PGM heatmap rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    Cfp,
    Ifp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Per-patch importance; non-negative and summing to one.
    pub importance: Vec<f64>,
    pub stream: StreamId,
}

/// Mean over heads of a `[heads × n × n]` map, returned as an `[n × n]` matrix.
pub fn head_average<T: Float>(map: &Tensor<T>) -> Result<Tensor<f64>> {
    let s = map.shape();
    if s.len() != 3 || s[1] != s[2] || s[0] == 0 {
        return Err(Error::InvalidShape { shape: s.to_vec() });
    }
    let (heads, n) = (s[0], s[1]);
    let mut out = vec![0.0; n * n];
    for h in 0..heads {
        for (o, &v) in out.iter_mut().zip(&map.data()[h * n * n..(h + 1) * n * n]) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Tensor::new(vec![n, n], out)
}

/// Rollout of head-averaged `[n × n]` layer matrices, first block first.
/// Token 0 is the class token. Each layer becomes `0.5·A + 0.5·I`, rows are
/// renormalized, and layers are composed as `A'_L ⋯ A'_1`. The class row over
/// patch positions is renormalized; when it carries no mass the result is uniform.
pub fn attention_rollout(layers: &[Tensor<f64>], stream: StreamId) -> Result<RolloutResult> {
    let first = layers.first().ok_or(Error::Empty("attention layers"))?;
    let n = first.shape()[0];
    if n < 2 {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
        });
    }
    let mut rollout = identity(n);
    for a in layers {
        if a.shape() != [n, n] {
            return Err(Error::shape("attention_rollout", a.shape(), &[n, n]));
        }
        let mut mixed: Vec<f64> = a.data().iter().map(|&v| 0.5 * v).collect();
        for i in 0..n {
            mixed[i * n + i] += 0.5;
        }
        for row in mixed.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        rollout = matmul(&mixed, &rollout, n);
    }
    let class_row = &rollout[1..n];
    let mass: f64 = class_row.iter().sum();
    let importance = if mass > 0.0 && mass.is_finite() {
        class_row.iter().map(|&v| v / mass).collect()
    } else {
        vec![1.0 / (n - 1) as f64; n - 1]
    };
    Ok(RolloutResult { importance, stream })
}

/// Rollout from raw encoder maps (`[heads × n × n]` per block).
pub fn rollout_encoder<T: Float>(maps: &[Tensor<T>], stream: StreamId) -> Result<RolloutResult> {
    let layers = maps.iter().map(head_average).collect::<Result<Vec<_>>>()?;
    attention_rollout(&layers, stream)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Binary PGM (P5, maxval 255) of the importance map laid out on a
/// `rows × cols` patch grid, each patch drawn as an `upscale²` block.
/// Values are min-max normalized; a constant map renders all zero.
pub fn render_pgm(r: &RolloutResult, grid: (usize, usize), upscale: usize) -> Result<Vec<u8>> {
    let (rows, cols) = grid;
    if rows * cols != r.importance.len() {
        return Err(Error::shape(
            "render_pgm",
            &[rows, cols],
            &[r.importance.len()],
        ));
    }
    if upscale == 0 {
        return Err(Error::config("visualize.upscale", "must be positive"));
    }
    let lo = r.importance.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r
        .importance
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let level = |v: f64| -> u8 {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let (w, h) = (cols * upscale, rows * upscale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(level(r.importance[(y / upscale) * cols + x / upscale]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![n, n], data).unwrap()
    }

    #[test]
    fn uniform_attention_gives_uniform_importance() {
        let r = attention_rollout(&[t(5, vec![0.2; 25])], StreamId::Cfp).unwrap();
        for v in &r.importance {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_attention_falls_back_to_uniform() {
        let r = attention_rollout(&[t(3, identity(3))], StreamId::Ifp).unwrap();
        assert_eq!(r.importance, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_rolled_three_token_case() {
        // Class token attends only to patch 2: A'[0] = [0.5, 0, 0.5].
        let a = t(3, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r = attention_rollout(&[a], StreamId::Cfp).unwrap();
        assert_eq!(r.importance, vec![0.0, 1.0]);
    }

    #[test]
    fn errors() {
        assert!(attention_rollout(&[], StreamId::Cfp).is_err());
        assert!(attention_rollout(&[t(3, identity(3)), t(2, identity(2))], StreamId::Cfp).is_err());
        let r = RolloutResult {
            importance: vec![0.25; 4],
            stream: StreamId::Cfp,
        };
        assert!(render_pgm(&r, (3, 1), 2).is_err());
        assert!(render_pgm(&r, (2, 2), 0).is_err());
    }

    #[test]
    fn pgm_layout() {
        let r = RolloutResult {
            importance: vec![0.25; 4],
            stream: StreamId::Cfp,
        };
        let pgm = render_pgm(&r, (2, 2), 3).unwrap();
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(pgm.len(), header.len() + 36);

        let hot = RolloutResult {
            importance: vec![0.0, 0.0, 1.0, 0.0],
            stream: StreamId::Cfp,
        };
        let body = render_pgm(&hot, (2, 2), 2).unwrap()[b"P5\n4 4\n255\n".len()..].to_vec();
        let bright: Vec<usize> = body
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 255)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(bright, vec![8, 9, 12, 13]);
        assert_eq!(body.iter().filter(|&&b| b == 0).count(), 12);
    }
}
