use super::TtnpbError;

/// Principal axes of a 2-D point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: [f64; 2],
    /// Unit loadings, PC1 first. The first nonzero loading of each is positive.
    pub components: [[f64; 2]; 2],
    /// Sample variances along each component (denominator `n - 1`).
    pub eigenvalues: [f64; 2],
    /// `(pc1, pc2)` coordinates of every input point.
    pub projected: Vec<[f64; 2]>,
}

fn orient(v: [f64; 2]) -> [f64; 2] {
    let lead = if v[0].abs() > 1e-15 { v[0] } else { v[1] };
    if lead < 0.0 {
        [-v[0], -v[1]]
    } else {
        v
    }
}

pub fn pb_pca(points: &[[f64; 2]]) -> Result<Pca, TtnpbError> {
    let n = points.len();
    if n < 2 {
        return Err(TtnpbError::DegenerateData(format!("PCA needs at least two points, got {n}")));
    }
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        points.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let denom = (n - 1) as f64;
    let (a, b, c) = (sxx / denom, sxy / denom, syy / denom);
    if a + c == 0.0 {
        return Err(TtnpbError::DegenerateData("all points are identical".into()));
    }
    let half_tr = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    let v1 = if b.abs() > 1e-15 * (a.abs() + c.abs()) {
        let (x, y) = (l1 - c, b);
        let norm = x.hypot(y);
        [x / norm, y / norm]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let pc1 = orient(v1);
    let pc2 = orient([-pc1[1], pc1[0]]);
    let projected = points
        .iter()
        .map(|p| {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            [d[0] * pc1[0] + d[1] * pc1[1], d[0] * pc2[0] + d[1] * pc2[1]]
        })
        .collect();
    Ok(Pca { mean, components: [pc1, pc2], eigenvalues: [l1, l2.max(0.0)], projected })
}

/// Mean silhouette coefficient with Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette<L: PartialEq>(points: &[[f64; 2]], labels: &[L]) -> f64 {
    assert_eq!(points.len(), labels.len());
    let dist = |i: usize, j: usize| (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut own = (0.0, 0usize);
        let mut others: Vec<(&L, f64, usize)> = Vec::new();
        for j in (0..n).filter(|j| *j != i) {
            let d = dist(i, j);
            if labels[j] == labels[i] {
                own.0 += d;
                own.1 += 1;
            } else if let Some(e) = others.iter_mut().find(|e| *e.0 == labels[j]) {
                e.1 += d;
                e.2 += 1;
            } else {
                others.push((&labels[j], d, 1));
            }
        }
        if own.1 == 0 || others.is_empty() {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = others.iter().map(|e| e.1 / e.2 as f64).fold(f64::INFINITY, f64::min);
        let s = (b - a) / a.max(b);
        if s.is_finite() {
            total += s;
        }
    }
    total / n as f64
}
