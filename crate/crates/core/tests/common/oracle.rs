//! Independent fine-step reference for the conductance LIF model: forward
//! Euler at a small step with instantaneous conductance jumps on spike arrival.

use ndarray::Array2;
use snnbench::snn_sim::LifParams;

/// Spike counts of every non-input layer (`[layer - 1][neuron]`).
pub fn fine_step_counts(
    projections: &[Array2<f64>],
    lif: &LifParams,
    inputs: &[Vec<f64>],
    duration: f64,
    dt: f64,
) -> Vec<Vec<u32>> {
    let n_steps = (duration / dt).round() as usize;
    let sizes: Vec<usize> = projections.iter().map(|w| w.ncols()).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![lif.v_rest; n]).collect();
    let mut ge: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut gi = ge.clone();
    let mut refrac_until: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![f64::NEG_INFINITY; n]).collect();
    let mut counts: Vec<Vec<u32>> = sizes.iter().map(|&n| vec![0; n]).collect();
    let mut arrivals: Vec<Vec<usize>> = vec![Vec::new(); n_steps + 1];
    for (i, train) in inputs.iter().enumerate() {
        for &t in train {
            let s = (t / dt).round() as usize;
            if s < n_steps {
                arrivals[s].push(i);
            }
        }
    }
    let g_leak = lif.cm / lif.tau_m;
    for s in 0..n_steps {
        let now = s as f64 * dt;
        let mut pre: Vec<usize> = arrivals[s].clone();
        for l in 0..projections.len() {
            for &i in &pre {
                for j in 0..sizes[l] {
                    let w = projections[l][[i, j]];
                    if w > 0.0 {
                        ge[l][j] += w;
                    } else {
                        gi[l][j] -= w;
                    }
                }
            }
            let mut fired = Vec::new();
            for j in 0..sizes[l] {
                if now < refrac_until[l][j] {
                    v[l][j] = lif.v_reset;
                } else {
                    let i_tot = g_leak * (lif.v_rest - v[l][j])
                        + ge[l][j] * (lif.e_rev_e - v[l][j])
                        + gi[l][j] * (lif.e_rev_i - v[l][j]);
                    v[l][j] += dt * i_tot / lif.cm;
                    if v[l][j] >= lif.v_thresh {
                        v[l][j] = lif.v_reset;
                        refrac_until[l][j] = now + dt + lif.t_refrac;
                        counts[l][j] += 1;
                        fired.push(j);
                    }
                }
                ge[l][j] -= dt * ge[l][j] / lif.tau_syn_e;
                gi[l][j] -= dt * gi[l][j] / lif.tau_syn_i;
            }
            pre = fired;
        }
    }
    counts
}
