//! Per-layer parameter generators: each target layer gets a small one-hidden-
//! layer ReLU net that maps a latent code to that layer's flattened weights
//! and biases. Generated parameters stay on the tape, so gradients flow from
//! any downstream loss back into both the generators and the code.

use rand::Rng;

use crate::diffcore::{
    linear_init, mlp_forward, siren_bound, Activation, MlpParams, MlpSpec, NodeId, Tape, Tensor,
};

pub const HYPER_HIDDEN: usize = 32;

/// Shape contract: latent width plus the target net the generators feed.
#[derive(Debug, Clone)]
pub struct HyperNetSpec {
    pub z_dim: usize,
    pub hidden: usize,
    pub target: MlpSpec,
}

impl HyperNetSpec {
    pub fn new(z_dim: usize, target: MlpSpec) -> Self {
        assert!(z_dim >= 1);
        HyperNetSpec {
            z_dim,
            hidden: HYPER_HIDDEN,
            target,
        }
    }

    /// Generator for target layer `i`: z -> hidden -> (fan_in*fan_out + fan_out).
    pub fn generator_mlp(&self, i: usize) -> MlpSpec {
        MlpSpec::new(
            vec![self.z_dim, self.hidden, self.target.layer_param_count(i)],
            Activation::Relu,
            0.0,
        )
    }

    pub fn n_generators(&self) -> usize {
        self.target.n_layers()
    }
}

/// Plain tensors for every generator, in target-layer order; each entry is
/// the generator's own two layers.
pub struct HyperNetTensors {
    pub layers: Vec<Vec<(Tensor, Tensor)>>,
}

/// Tape nodes for every generator (one MlpParams per target layer).
pub struct HyperNetParams {
    pub layers: Vec<MlpParams>,
}

/// Initialize the generators so that at z near the origin the generated net
/// is a healthy sine net: the output bias carries a SIREN draw for the target
/// layer, the output weights are scaled down a hundredfold, and the hidden
/// layer is a standard ReLU init with zero bias.
pub fn init_hypernet(spec: &HyperNetSpec, rng: &mut impl Rng) -> HyperNetTensors {
    let mut layers = Vec::with_capacity(spec.n_generators());
    for i in 0..spec.n_generators() {
        let (fi, fo) = (spec.target.widths[i], spec.target.widths[i + 1]);
        let count = spec.target.layer_param_count(i);

        let (w1, _) = linear_init(spec.z_dim, spec.hidden, rng);
        let b1 = Tensor::zeros(1, spec.hidden);

        let (mut w2, _) = linear_init(spec.hidden, count, rng);
        for v in &mut w2.data {
            *v *= 0.01;
        }
        let tb = siren_bound(fi, spec.target.w0, i == 0);
        let mut b2 = Tensor::zeros(1, count);
        for v in &mut b2.data[..fi * fo] {
            *v = rng.gen_range(-tb..=tb);
        }
        // trailing fan_out entries are the target biases, left at zero

        layers.push(vec![(w1, b1), (w2, b2)]);
    }
    HyperNetTensors { layers }
}

/// Zero the generator slices that produce columns `cols` of target layer
/// `layer` (both its weight columns and bias entries), so those outputs are
/// exactly 0.0 for every latent code.
pub fn zero_output_columns(
    tensors: &mut HyperNetTensors,
    spec: &HyperNetSpec,
    layer: usize,
    cols: std::ops::Range<usize>,
) {
    let (fi, fo) = (spec.target.widths[layer], spec.target.widths[layer + 1]);
    assert!(cols.end <= fo);
    let (w2, b2) = &mut tensors.layers[layer][1];
    let (rows, width) = (w2.rows(), w2.cols());
    let mut clear = |flat: usize| {
        for h in 0..rows {
            w2.data[h * width + flat] = 0.0;
        }
        b2.data[flat] = 0.0;
    };
    for c in cols {
        for r in 0..fi {
            clear(r * fo + c); // row-major target weight position
        }
        clear(fi * fo + c); // target bias position
    }
}

/// Run every generator on the code node `z` (1 x z_dim) and reshape the
/// outputs into the target net's layer parameters.
pub fn hyper_generate(
    tape: &mut Tape,
    spec: &HyperNetSpec,
    params: &HyperNetParams,
    z: NodeId,
) -> MlpParams {
    assert_eq!(tape.value(z).cols(), spec.z_dim, "latent width mismatch");
    assert_eq!(params.layers.len(), spec.n_generators());
    let mut layers = Vec::with_capacity(spec.n_generators());
    for i in 0..spec.n_generators() {
        let (fi, fo) = (spec.target.widths[i], spec.target.widths[i + 1]);
        let gen = spec.generator_mlp(i);
        let out = mlp_forward(tape, &gen, &params.layers[i], z);
        let w_flat = tape.slice_cols(out, 0, fi * fo);
        let w = tape.reshape(w_flat, vec![fi, fo]);
        let b = tape.slice_cols(out, fi * fo, fi * fo + fo);
        layers.push((w, b));
    }
    MlpParams { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::params_from_tensors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn target() -> MlpSpec {
        MlpSpec::new(vec![5, 8, 8, 2], Activation::Sine, 30.0)
    }

    fn as_arcs(t: &HyperNetTensors) -> Vec<Vec<(Arc<Tensor>, Arc<Tensor>)>> {
        t.layers
            .iter()
            .map(|l| {
                l.iter()
                    .map(|(w, b)| (Arc::new(w.clone()), Arc::new(b.clone())))
                    .collect()
            })
            .collect()
    }

    fn on_tape(tape: &mut Tape, arcs: &[Vec<(Arc<Tensor>, Arc<Tensor>)>]) -> HyperNetParams {
        HyperNetParams {
            layers: arcs.iter().map(|l| params_from_tensors(tape, l)).collect(),
        }
    }

    #[test]
    fn zero_code_yields_the_bias_outputs() {
        let spec = HyperNetSpec::new(4, target());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tensors = init_hypernet(&spec, &mut rng);
        let arcs = as_arcs(&tensors);
        let mut tape = Tape::new();
        let params = on_tape(&mut tape, &arcs);
        let z = tape.input(Tensor::zeros(1, 4));
        let generated = hyper_generate(&mut tape, &spec, &params, z);
        for (i, &(w, b)) in generated.layers.iter().enumerate() {
            let w2_b = &tensors.layers[i][1].1; // generator output bias
            let (fi, fo) = (spec.target.widths[i], spec.target.widths[i + 1]);
            let wt = tape.value(w);
            for r in 0..fi {
                for c in 0..fo {
                    assert_eq!(wt.at(r, c), w2_b.data[r * fo + c]);
                }
            }
            let bt = tape.value(b);
            for c in 0..fo {
                assert_eq!(bt.at(0, c), w2_b.data[fi * fo + c]);
            }
        }
    }

    #[test]
    fn generated_shapes_match_the_target() {
        let spec = HyperNetSpec::new(6, target());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tensors = init_hypernet(&spec, &mut rng);
        let arcs = as_arcs(&tensors);
        let mut tape = Tape::new();
        let params = on_tape(&mut tape, &arcs);
        let z = tape.input(Tensor::new(vec![1, 6], vec![0.1; 6]));
        let generated = hyper_generate(&mut tape, &spec, &params, z);
        assert_eq!(generated.layers.len(), spec.target.n_layers());
        for (i, &(w, b)) in generated.layers.iter().enumerate() {
            assert_eq!(
                tape.value(w).shape,
                vec![spec.target.widths[i], spec.target.widths[i + 1]]
            );
            assert_eq!(tape.value(b).cols(), spec.target.widths[i + 1]);
        }
    }

    #[test]
    fn distinct_codes_give_distinct_parameters() {
        let spec = HyperNetSpec::new(4, target());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tensors = init_hypernet(&spec, &mut rng);
        let arcs = as_arcs(&tensors);
        let mut tape = Tape::new();
        let params = on_tape(&mut tape, &arcs);
        let za = tape.input(Tensor::new(vec![1, 4], vec![0.5, -0.2, 0.1, 0.9]));
        let zb = tape.input(Tensor::new(vec![1, 4], vec![-0.4, 0.3, 0.6, -0.1]));
        let ga = hyper_generate(&mut tape, &spec, &params, za);
        let gb = hyper_generate(&mut tape, &spec, &params, zb);
        let (wa, wb) = (tape.value(ga.layers[0].0), tape.value(gb.layers[0].0));
        assert_ne!(wa.data, wb.data);
    }

    /// Gradient of a downstream scalar w.r.t. the code, flowing through both
    /// the generators and the generated net, against central differences.
    #[test]
    fn code_gradient_through_generated_net_matches_fd() {
        let spec = HyperNetSpec::new(4, MlpSpec::new(vec![3, 8, 1], Activation::Sine, 30.0));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tensors = init_hypernet(&spec, &mut rng);
        let arcs = as_arcs(&tensors);
        let base = [0.3, -0.5, 0.2, 0.8];
        let x_pt = [0.12, -0.33, 0.47];

        let eval = |zv: [f64; 4]| -> f64 {
            let mut tape = Tape::new();
            let params = on_tape(&mut tape, &arcs);
            let z = tape.input(Tensor::new(vec![1, 4], zv.to_vec()));
            let generated = hyper_generate(&mut tape, &spec, &params, z);
            let x = tape.input(Tensor::from_points(&[x_pt]));
            let y = mlp_forward(&mut tape, &spec.target, &generated, x);
            let sq = tape.mul(y, y);
            tape.value(sq).item()
        };

        let mut tape = Tape::new();
        let params = on_tape(&mut tape, &arcs);
        let z = tape.input(Tensor::new(vec![1, 4], base.to_vec()));
        let generated = hyper_generate(&mut tape, &spec, &params, z);
        let x = tape.input(Tensor::from_points(&[x_pt]));
        let y = mlp_forward(&mut tape, &spec.target, &generated, x);
        let sq = tape.mul(y, y);
        let g = tape.input_gradient(sq, z);
        let analytic = tape.value(g).clone();

        let h = 1e-5;
        for i in 0..4 {
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let rel = (fd - analytic.data[i]).abs() / analytic.data[i].abs().max(1e-8);
            assert!(rel < 1e-4, "code {i}: fd {fd} vs {}", analytic.data[i]);
        }
    }

    #[test]
    fn zeroed_columns_generate_exact_zeros_for_any_code() {
        let spec = HyperNetSpec::new(4, MlpSpec::new(vec![5, 8, 7], Activation::Sine, 30.0));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tensors = init_hypernet(&spec, &mut rng);
        let last = spec.target.n_layers() - 1;
        zero_output_columns(&mut tensors, &spec, last, 6..7);
        let arcs = as_arcs(&tensors);
        let mut tape = Tape::new();
        let params = on_tape(&mut tape, &arcs);
        for seed in 0..5u64 {
            let mut zr = ChaCha8Rng::seed_from_u64(seed);
            let z = tape.input(Tensor::new(
                vec![1, 4],
                (0..4).map(|_| zr.gen_range(-2.0..2.0)).collect(),
            ));
            let generated = hyper_generate(&mut tape, &spec, &params, z);
            let (w, b) = generated.layers[last];
            let wt = tape.value(w);
            for r in 0..wt.rows() {
                assert_eq!(wt.at(r, 6), 0.0);
            }
            assert_eq!(tape.value(b).at(0, 6), 0.0);
            // other columns untouched
            assert_ne!(wt.at(0, 0), 0.0);
        }
    }
}
