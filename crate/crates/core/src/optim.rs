//! Derivative-free Nelder-Mead minimization and fixed-order Gauss-Legendre
//! quadrature used by the tail fitting code.

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub max_iter: usize,
    /// Convergence when the simplex function spread falls below this.
    pub f_tol: f64,
    /// ... and the simplex diameter falls below this.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { max_iter: 5000, f_tol: 1e-10, x_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl NelderMead {
    /// Minimizes `f` from `x0` with an axis-aligned initial simplex of the
    /// given `steps`. Non-finite objective values are treated as +inf.
    pub fn minimize<F>(&self, f: F, x0: &[f64], steps: &[f64]) -> Minimum
    where
        F: Fn(&[f64]) -> f64,
    {
        let dim = x0.len();
        let eval = |x: &[f64]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        simplex.push(x0.to_vec());
        for i in 0..dim {
            let mut v = x0.to_vec();
            v[i] += steps[i];
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iter {
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = (values[dim] - values[0]).abs();
            let diameter = simplex[1..]
                .iter()
                .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if values[0].is_finite() && spread <= self.f_tol * (values[0].abs() + self.f_tol) && diameter <= self.x_tol
            {
                converged = true;
                break;
            }
            iterations += 1;

            let centroid: Vec<f64> =
                (0..dim).map(|k| simplex[..dim].iter().map(|v| v[k]).sum::<f64>() / dim as f64).collect();
            let along =
                |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[dim]).map(|(c, w)| c + t * (w - c)).collect() };

            let reflected = along(-1.0);
            let fr = eval(&reflected);
            if fr < values[0] {
                let expanded = along(-2.0);
                let fe = eval(&expanded);
                if fe < fr {
                    simplex[dim] = expanded;
                    values[dim] = fe;
                } else {
                    simplex[dim] = reflected;
                    values[dim] = fr;
                }
                continue;
            }
            if fr < values[dim - 1] {
                simplex[dim] = reflected;
                values[dim] = fr;
                continue;
            }
            let (contracted, fc) = if fr < values[dim] {
                let c = along(-0.5);
                let fc = eval(&c);
                (c, fc)
            } else {
                let c = along(0.5);
                let fc = eval(&c);
                (c, fc)
            };
            if fc < values[dim].min(fr) {
                simplex[dim] = contracted;
                values[dim] = fc;
                continue;
            }
            let best = simplex[0].clone();
            for i in 1..=dim {
                for (x, b) in simplex[i].iter_mut().zip(&best) {
                    *x = b + 0.5 * (*x - b);
                }
                values[i] = eval(&simplex[i]);
            }
        }

        let best = (0..=dim).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        Minimum { x: simplex[best].clone(), value: values[best], iterations, converged }
    }
}

const GL10_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL10_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_4,
    0.219_086_362_515_982,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

/// Composite 10-point Gauss-Legendre over `[a, b]` with `panels` panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let mut s = 0.0;
        for (x, w) in GL10_NODES.iter().zip(GL10_WEIGHTS.iter()) {
            s += w * (f(mid - half * x) + f(mid + half * x));
        }
        total += s * half;
    }
    total
}
