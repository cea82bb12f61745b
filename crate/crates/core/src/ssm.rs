//! Diagonal state-space models: zero-order-hold discretization, the
//! recurrent and convolutional forms of the time-invariant model, and the
//! input-dependent selective scan.
//!
//! The state matrix is diagonal and real, `A = -exp(A_log)`, one row of `N`
//! entries per channel. Channel `d` evolves as
//!
//! ```text
//! h_t = Ā h_{t-1} + B̄ x_t,    y_t = C h_t + D x_t
//! Ā = exp(Δ A),               B̄ = (Δ A)^-1 (exp(Δ A) - I) Δ B
//! ```
//!
//! For diagonal `A` the input coefficient reduces to `expm1(Δ a) / a` per
//! entry, which is replaced by its limit `Δ` once `|Δ a| < 1e-8`.

use ainet_tensor::{CustomOp, Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::Linear;

/// Below this `|Δ a|` the ZOH input coefficient is taken as `Δ`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous-time parameters of a diagonal time-invariant SSM.
#[derive(Clone, Debug)]
pub struct SsmParameters {
    /// `[D, N]`; `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[N]`, shared by every channel.
    pub b: Tensor,
    /// `[N]`, shared by every channel.
    pub c: Tensor,
    /// `[D]`; optional residual skip.
    pub d_skip: Option<Tensor>,
}

impl SsmParameters {
    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Diagonal of `A`, `[D, N]`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    fn validate(&self) -> Result<()> {
        let s = self.a_log.shape();
        let ok = s.len() == 2
            && self.b.shape() == [s[1]]
            && self.c.shape() == [s[1]]
            && self.d_skip.as_ref().is_none_or(|d| d.shape() == [s[0]]);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Shape(format!(
                "ssm parameters: a_log {:?}, b {:?}, c {:?}",
                s,
                self.b.shape(),
                self.c.shape()
            )))
        }
    }
}

/// Discrete `Ā`, `B̄`, both `[D, N]`.
#[derive(Clone, Debug)]
pub struct DiscretizedSsm {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// `(Ā, expm1(Δa)/a)` for one diagonal entry `a` and step `Δ`.
#[inline]
pub fn zoh_entry(a: f64, delta: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let coef = if x.abs() < ZOH_LIMIT { delta } else { x.exp_m1() / a };
    (a_bar, coef)
}

/// `(x e^x - expm1(x)) / x^2`, so that `d/da [expm1(Δa)/a] = Δ² f(Δa)`.
#[inline]
fn zoh_coef_da_scaled(x: f64) -> f64 {
    if x.abs() < 0.1 {
        // sum_{m>=2} (m-1)/m! x^(m-2)
        let mut term_fact = 2.0; // m!
        let mut pow = 1.0;
        let mut s = 0.0;
        for m in 2..16 {
            if m > 2 {
                term_fact *= m as f64;
                pow *= x;
            }
            s += (m as f64 - 1.0) / term_fact * pow;
        }
        s
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

/// Zero-order-hold discretization of a time-invariant model with per-channel
/// step sizes `delta` (`[D]`, or `[1]` for a shared step).
pub fn discretize_zoh(params: &SsmParameters, delta: &Tensor) -> Result<DiscretizedSsm> {
    params.validate()?;
    let (d, n) = (params.channels(), params.state_size());
    if delta.numel() != d && delta.numel() != 1 {
        return Err(CoreError::Shape(format!(
            "delta has {} entries for {d} channels",
            delta.numel()
        )));
    }
    if let Some(&bad) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(CoreError::NonPositiveStep(bad));
    }
    let a = params.a();
    let mut a_bar = Tensor::zeros(&[d, n]);
    let mut b_bar = Tensor::zeros(&[d, n]);
    for ch in 0..d {
        let dt = delta.data()[if delta.numel() == 1 { 0 } else { ch }];
        for s in 0..n {
            let (ab, coef) = zoh_entry(a.data()[ch * n + s], dt);
            a_bar.data_mut()[ch * n + s] = ab;
            b_bar.data_mut()[ch * n + s] = coef * params.b.data()[s];
        }
    }
    Ok(DiscretizedSsm { a_bar, b_bar })
}

fn check_lti_input(disc: &DiscretizedSsm, c: &Tensor, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (d, n) = (disc.a_bar.shape()[0], disc.a_bar.shape()[1]);
    if c.shape() != [n] {
        return Err(CoreError::Shape(format!(
            "time-invariant scan needs C of shape [{n}], got {:?}",
            c.shape()
        )));
    }
    if x.rank() != 3 || x.shape()[2] != d {
        return Err(CoreError::Shape(format!(
            "scan input {:?} is not [B, L, {d}]",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], d, n))
}

/// Left-to-right recurrence from `h_0 = 0`.
pub fn recurrent_scan(disc: &DiscretizedSsm, c: &Tensor, d_skip: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let (bsz, len, d, n) = check_lti_input(disc, c, x)?;
    let (ab, bb, cv, xv) = (disc.a_bar.data(), disc.b_bar.data(), c.data(), x.data());
    let mut y = Tensor::zeros(&[bsz, len, d]);
    let mut h = vec![0.0; d * n];
    for b in 0..bsz {
        h.fill(0.0);
        for t in 0..len {
            for ch in 0..d {
                let u = xv[(b * len + t) * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let k = ch * n + s;
                    h[k] = ab[k] * h[k] + bb[k] * u;
                    acc += cv[s] * h[k];
                }
                if let Some(skip) = d_skip {
                    acc += skip.data()[ch] * u;
                }
                y.data_mut()[(b * len + t) * d + ch] = acc;
            }
        }
    }
    Ok(y)
}

/// Convolution kernel `K[d, j] = C Ā^j B̄` for `j < len`. Only defined for
/// time-invariant `C`; a per-step `C` is rejected.
pub fn conv_kernel(disc: &DiscretizedSsm, c: &Tensor, len: usize) -> Result<Tensor> {
    let (d, n) = (disc.a_bar.shape()[0], disc.a_bar.shape()[1]);
    if c.rank() != 1 || c.shape() != [n] {
        return Err(CoreError::Shape(format!(
            "the kernel form needs a time-invariant C of shape [{n}], got {:?}",
            c.shape()
        )));
    }
    if len == 0 {
        return Err(CoreError::Shape("kernel length must be positive".into()));
    }
    let mut k = Tensor::zeros(&[d, len]);
    let mut power = vec![0.0; n];
    for ch in 0..d {
        // power[s] = Ā^j B̄ for the current j
        power.copy_from_slice(&disc.b_bar.data()[ch * n..(ch + 1) * n]);
        for j in 0..len {
            let kv: f64 = power.iter().zip(c.data()).map(|(p, cv)| p * cv).sum();
            k.data_mut()[ch * len + j] = kv;
            for s in 0..n {
                power[s] *= disc.a_bar.data()[ch * n + s];
            }
        }
    }
    Ok(k)
}

/// Causal convolution `y_t = sum_{j<=t} K[j] x_{t-j}` per channel, plus the
/// optional skip term.
pub fn conv_scan(kernel: &Tensor, d_skip: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 2 || kernel.shape()[0] != x.shape()[2] || kernel.shape()[1] < x.shape()[1] {
        return Err(CoreError::Shape(format!(
            "kernel {:?} cannot convolve input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let (bsz, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = kernel.shape()[1];
    let mut y = Tensor::zeros(&[bsz, len, d]);
    for b in 0..bsz {
        for t in 0..len {
            for ch in 0..d {
                let mut acc = 0.0;
                for j in 0..=t {
                    acc += kernel.data()[ch * m + j] * x.data()[(b * len + t - j) * d + ch];
                }
                if let Some(skip) = d_skip {
                    acc += skip.data()[ch] * x.data()[(b * len + t) * d + ch];
                }
                y.data_mut()[(b * len + t) * d + ch] = acc;
            }
        }
    }
    Ok(y)
}

/// Forward values and saved state of a selective scan.
#[derive(Debug)]
struct ScanCache {
    /// `h_t` after the update at step `t`, `[B, L, D, N]`.
    states: Vec<f64>,
    a_bar: Vec<f64>,
    coef: Vec<f64>,
}

struct ScanDims {
    bsz: usize,
    len: usize,
    d: usize,
    n: usize,
}

fn scan_dims(u: &[usize], delta: &[usize], a_log: &[usize], b: &[usize], c: &[usize], d_skip: Option<&[usize]>) -> Result<ScanDims> {
    let bad = || {
        CoreError::Shape(format!(
            "selective scan: u {u:?}, delta {delta:?}, a_log {a_log:?}, B {b:?}, C {c:?}, D {d_skip:?}"
        ))
    };
    if u.len() != 3 || a_log.len() != 2 {
        return Err(bad());
    }
    let (bsz, len, d) = (u[0], u[1], u[2]);
    let n = a_log[1];
    let ok = delta == u
        && a_log[0] == d
        && b == [bsz, len, n]
        && c == [bsz, len, n]
        && d_skip.is_none_or(|s| s == [d]);
    if ok {
        Ok(ScanDims { bsz, len, d, n })
    } else {
        Err(bad())
    }
}

/// Selective scan with per-step `Δ [B,L,D]`, `B [B,L,N]`, `C [B,L,N]`.
///
/// Discretization coefficients for all steps are computed in one pass before
/// the recurrence runs; each `(Δ, a)` pair uses the ZOH rule above.
/// Cost: `6*B*L*D*N` multiply-adds for discretization, update and readout,
/// plus `2*B*L*D` for the skip term when present.
pub fn selective_scan(
    g: &mut Graph,
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Option<Var>,
) -> Result<Var> {
    let dims = scan_dims(
        g.shape(u),
        g.shape(delta),
        g.shape(a_log),
        g.shape(b),
        g.shape(c),
        d_skip.map(|v| g.shape(v)),
    )?;
    let ScanDims { bsz, len, d, n } = dims;
    let uv = g.value(u).data();
    let dv = g.value(delta).data();
    let a: Vec<f64> = g.value(a_log).data().iter().map(|v| -v.exp()).collect();
    let bv = g.value(b).data();
    let cv = g.value(c).data();
    let skip = d_skip.map(|v| g.value(v).data());

    let total = bsz * len * d * n;
    let mut a_bar = Vec::with_capacity(total);
    let mut coef = Vec::with_capacity(total);
    for (row, &dt) in dv.iter().enumerate() {
        let ch = row % d;
        let xs = a[ch * n..(ch + 1) * n].iter().map(|&av| (av, dt * av));
        a_bar.extend(xs.clone().map(|(_, x)| x.exp()));
        coef.extend(xs.zip(&a_bar[row * n..]).map(|((av, x), &ab)| {
            if x.abs() < ZOH_LIMIT {
                dt
            } else if x.abs() < 1e-3 {
                x.exp_m1() / av
            } else {
                (ab - 1.0) / av
            }
        }));
    }

    let step = d * n;
    let mut states: Vec<f64> = Vec::with_capacity(total);
    let mut y = vec![0.0; bsz * len * d];
    let mut cur = vec![0.0; step];
    for bi in 0..bsz {
        for t in 0..len {
            let row = bi * len + t;
            let bt = &bv[row * n..(row + 1) * n];
            let ct = &cv[row * n..(row + 1) * n];
            let start = row * step;
            let prev = if t == 0 { None } else { Some(&states[start - step..]) };
            for ch in 0..d {
                let uu = uv[row * d + ch];
                let off = ch * n;
                let (abs, cfs) = (&a_bar[start + off..start + off + n], &coef[start + off..start + off + n]);
                let hs = &mut cur[off..off + n];
                match prev {
                    Some(p) => {
                        for (((h, &hp), (&ab, &cf)), &bb) in hs.iter_mut().zip(&p[off..off + n]).zip(abs.iter().zip(cfs)).zip(bt) {
                            *h = ab * hp + cf * bb * uu;
                        }
                    }
                    None => {
                        for ((h, &cf), &bb) in hs.iter_mut().zip(cfs).zip(bt) {
                            *h = cf * bb * uu;
                        }
                    }
                }
                let mut acc = 0.0;
                for (&cc, &h) in ct.iter().zip(hs.iter()) {
                    acc += cc * h;
                }
                if let Some(sk) = skip {
                    acc += sk[ch] * uu;
                }
                y[row * d + ch] = acc;
            }
            states.extend_from_slice(&cur);
        }
    }

    let output = Tensor::new(vec![bsz, len, d], y)?;
    let op = SelectiveScanOp {
        cache: ScanCache { states, a_bar, coef },
        n,
        has_skip: d_skip.is_some(),
        cost: (6 * total + if d_skip.is_some() { 2 * bsz * len * d } else { 0 }) as u64,
    };
    let mut inputs = vec![u, delta, a_log, b, c];
    inputs.extend(d_skip);
    Ok(g.custom(&inputs, output, Box::new(op)))
}

#[derive(Debug)]
struct SelectiveScanOp {
    cache: ScanCache,
    n: usize,
    has_skip: bool,
    cost: u64,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (u, delta, a_log, bm, cm) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (bsz, len, d) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let n = self.n;
        let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
        let skip = self.has_skip.then(|| inputs[5].data());
        let (uv, dv, bv, cv) = (u.data(), delta.data(), bm.data(), cm.data());
        let ScanCache { states, a_bar, coef } = &self.cache;

        let mut gu = vec![0.0; uv.len()];
        let mut gdelta = vec![0.0; dv.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; bv.len()];
        let mut gc = vec![0.0; cv.len()];
        let mut gskip = vec![0.0; d];
        let mut dh = vec![0.0; d * n];

        let zeros = vec![0.0; n];
        for bi in 0..bsz {
            dh.fill(0.0);
            for t in (0..len).rev() {
                let row = bi * len + t;
                let rn = row * n..(row + 1) * n;
                let (bt, ct) = (&bv[rn.clone()], &cv[rn.clone()]);
                for ch in 0..d {
                    let gy = grad[row * d + ch];
                    let uu = uv[row * d + ch];
                    let dt = dv[row * d + ch];
                    let base = (row * d + ch) * n;
                    let mut du = 0.0;
                    if let Some(sk) = skip {
                        du += gy * sk[ch];
                        gskip[ch] += gy * uu;
                    }
                    let mut ddt = 0.0;
                    let hs = &states[base..base + n];
                    let hps = if t == 0 { &zeros[..] } else { &states[base - d * n..base - d * n + n] };
                    let (abs, cfs) = (&a_bar[base..base + n], &coef[base..base + n]);
                    let (ach, gach, dhch) = (&a[ch * n..(ch + 1) * n], &mut ga[ch * n..(ch + 1) * n], &mut dh[ch * n..(ch + 1) * n]);
                    let (gct, gbt) = (&mut gc[rn.clone()], &mut gb[rn.clone()]);
                    for s in 0..n {
                        let h = hs[s];
                        gct[s] += gy * h;
                        let dht = dhch[s] + gy * ct[s];
                        let hp = hps[s];
                        let (ab, cf) = (abs[s], cfs[s]);
                        let bval = bt[s];
                        let d_ab = dht * hp;
                        let d_cf = dht * bval * uu;
                        gbt[s] += dht * cf * uu;
                        du += dht * cf * bval;
                        let av = ach[s];
                        ddt += d_ab * av * ab + d_cf * ab;
                        let x = dt * av;
                        // d coef / d a, reusing the cached exp(x) away from zero
                        let cf_da = if x.abs() < 0.1 {
                            dt * dt * zoh_coef_da_scaled(x)
                        } else {
                            (dt * ab - cf) / av
                        };
                        gach[s] += d_ab * dt * ab + d_cf * cf_da;
                        dhch[s] = dht * ab;
                    }
                    gu[row * d + ch] += du;
                    gdelta[row * d + ch] += ddt;
                }
            }
        }
        // dA_log = dA * dA/dA_log = dA * A
        let ga_log: Vec<f64> = ga.iter().zip(&a).map(|(g, av)| g * av).collect();
        let mut out = vec![
            needs[0].then_some(gu),
            needs[1].then_some(gdelta),
            needs[2].then_some(ga_log),
            needs[3].then_some(gb),
            needs[4].then_some(gc),
        ];
        if self.has_skip {
            out.push(needs[5].then_some(gskip));
        }
        out
    }

    fn mults_adds(&self) -> u64 {
        self.cost
    }

    fn saved_values(&self) -> usize {
        3 * self.cache.states.len()
    }
}

/// Input-dependent SSM: `Δ_t = softplus(dt_proj(r_t))`, `B_t`, `C_t` and the
/// low-rank `r_t` all projected from the input token `x_t`.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: Option<ParamId>,
    pub channels: usize,
    pub state_size: usize,
    pub dt_rank: usize,
}

/// Range of `softplus(dt bias)` at initialization.
pub const DT_INIT_RANGE: (f64, f64) = (0.01, 0.1);

impl SelectiveSsm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state_size: usize,
        dt_rank: usize,
        use_skip: bool,
    ) -> Result<Self> {
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), channels, dt_rank + 2 * state_size, false)?;
        let dt_proj = Linear::with_init(
            store,
            &format!("{name}.dt_proj"),
            dt_rank,
            channels,
            Init::fan_in(dt_rank),
            Some(Init::InverseSoftplusLogUniform {
                min: DT_INIT_RANGE.0,
                max: DT_INIT_RANGE.1,
            }),
        )?;
        let a_log = store.register(format!("{name}.a_log"), &[channels, state_size], Init::S4dRealLog)?;
        let d_skip = use_skip
            .then(|| store.register(format!("{name}.d_skip"), &[channels], Init::Ones))
            .transpose()?;
        Ok(Self {
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            channels,
            state_size,
            dt_rank,
        })
    }

    pub fn num_params(&self) -> usize {
        self.x_proj.num_params()
            + self.dt_proj.num_params()
            + self.channels * self.state_size
            + if self.d_skip.is_some() { self.channels } else { 0 }
    }

    /// `[B, L, D] -> [B, L, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let proj = self.x_proj.forward(g, store, u)?;
        let parts = g.split(proj, &[self.dt_rank, self.state_size, self.state_size], 2)?;
        let dt = self.dt_proj.forward(g, store, parts[0])?;
        let delta = g.softplus(dt);
        let a_log = g.param(store, self.a_log);
        let d_skip = self.d_skip.map(|id| g.param(store, id));
        selective_scan(g, u, delta, a_log, parts[1], parts[2], d_skip)
    }
}
