//! Straight-line dense layers over row vectors, for recomputation oracles.

use splatrefine::nn::ParamSet;

pub type Rows = Vec<Vec<f64>>;

fn weights(p: &ParamSet<f64>, name: &str) -> (Vec<f64>, Vec<usize>) {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (t.data().to_vec(), t.shape().to_vec())
}

pub fn linear(p: &ParamSet<f64>, name: &str, x: &Rows) -> Rows {
    let (w, shape) = weights(p, &format!("{name}.w"));
    let (b, _) = weights(p, &format!("{name}.b"));
    let (fi, fo) = (shape[0], shape[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fi);
            (0..fo)
                .map(|j| b[j] + (0..fi).map(|i| row[i] * w[i * fo + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(p: &ParamSet<f64>, name: &str, x: &Rows) -> Rows {
    let (g, _) = weights(p, &format!("{name}.g"));
    let (b, _) = weights(p, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let inv = 1.0 / (v + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, x)| (x - m) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn relu(x: &Rows) -> Rows {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn mlp(p: &ParamSet<f64>, name: &str, x: &Rows) -> Rows {
    let h = linear(p, &format!("{name}.l1"), x);
    let h = relu(&layer_norm(p, &format!("{name}.ln"), &h));
    linear(p, &format!("{name}.l2"), &h)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn mul(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).collect()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(x: &Rows) -> Rows {
    x.iter().map(|r| softmax_row(r)).collect()
}

pub fn max_abs_diff(a: &Rows, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
