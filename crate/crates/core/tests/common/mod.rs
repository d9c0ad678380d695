//! Finite-difference gradient cases shared by the gradient and acceptance targets.

#![allow(dead_code)]

pub mod oracles;

use std::rc::Rc;

use gaunet_core::critic::{Critic, CriticConfig};
use gaunet_core::generator::{Generator, GeneratorConfig};
use gaunet_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use gaunet_core::graph::concat_channels;
use gaunet_core::nn::{self, Ctx, RenormLimits};
use gaunet_core::params::{LayerParams, ParameterStore};
use gaunet_core::rng::{stream, RngHandle};
use gaunet_core::training::{critic_loss, generator_loss, gradient_penalty};
use gaunet_core::{Graph, Tensor, Var};
use rand::Rng;

/// Tolerance for single operations.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for whole networks.
pub const NETWORK_TOL: f64 = 1e-3;

pub type Op = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>>;

pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    pub coords: Option<usize>,
    pub build: fn(&mut RngHandle) -> (Vec<Tensor<f64>>, Op),
}

pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: GradCheckReport,
    pub passed: bool,
}

fn uniform(rng: &mut RngHandle, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut RngHandle, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-1.0..1.0);
        if kinks.iter().all(|k| (v - k).abs() >= gap) {
            break v;
        }
    })
}

fn layer<'g>(name: &str, weight: Var<'g, f64>, bias: Option<Var<'g, f64>>) -> LayerParams<'g, f64> {
    LayerParams {
        name: name.to_string(),
        weight,
        bias,
        running_stats: None,
    }
}

fn norm_layer<'g>(weight: Var<'g, f64>, bias: Var<'g, f64>, c: usize) -> LayerParams<'g, f64> {
    LayerParams {
        name: "norm".to_string(),
        weight,
        bias: Some(bias),
        running_stats: Some((Tensor::zeros(&[c]), Tensor::full(&[c], 1.0))),
    }
}

/// Batch-norm limits keep the renormalization factors at their constant values.
fn train_ctx() -> Ctx<f64> {
    Ctx::train(stream(0, "gradcheck-ctx"), RenormLimits::BATCH_NORM)
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "arithmetic",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)];
                (
                    ins,
                    Box::new(|_, v| (v[0] * v[1] - v[0] + v[1]).affine(1.5, -0.3).scale(2.0).neg()),
                )
            },
        },
        Case {
            name: "powf_exp_ln",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![uniform(r, &[3, 5], 0.5, 2.0), uniform(r, &[3, 5], -1.0, 1.0)];
                (
                    ins,
                    Box::new(|_, v| v[0].powf(-0.5) + v[0].powf(3.0) + v[0].ln() + v[1].exp()),
                )
            },
        },
        Case {
            name: "sigmoid_sqrt",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![uniform(r, &[4, 4], -3.0, 3.0), uniform(r, &[4, 4], 0.2, 2.0)];
                (ins, Box::new(|_, v| v[0].sigmoid() * v[1].sqrt()))
            },
        },
        Case {
            name: "leaky_relu_clamp",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    away_from(r, &[2, 3, 3], &[0.0], 0.01),
                    away_from(r, &[2, 3, 3], &[-0.5, 0.5], 0.01),
                ];
                (ins, Box::new(|_, v| nn::leaky_relu(v[0]) + v[1].clamp(-0.5, 0.5)))
            },
        },
        Case {
            name: "mask_reshape",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let mask = Rc::new(Tensor::from_fn(&[2, 6], |_| if r.random::<bool>() { 2.0 } else { 0.0 }));
                let ins = vec![uniform(r, &[2, 6], -1.0, 1.0)];
                (ins, Box::new(move |_, v| v[0].mul_mask(mask.clone()).reshape(&[3, 4])))
            },
        },
        Case {
            name: "reductions_and_broadcasts",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| {
                        let s = v[0].shape();
                        let per_sample = (v[0] * v[0]).sum_per_sample() + v[1];
                        let per_channel = v[0].sum_per_channel().sigmoid() * v[2];
                        v[0] * per_sample.expand_per_sample(&s)
                            + per_channel.expand_per_channel(&s)
                            + v[0].global_avg_pool().sum().expand(1, 24, &s)
                            + v[0].mean().expand(1, 24, &s)
                    }),
                )
            },
        },
        Case {
            name: "affine_and_inner_products",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| {
                        let y = v[0]
                            .channel_affine(Some(v[1]), Some(v[2]))
                            .sample_affine(Some(v[3]), Some(v[3]));
                        let c = y.sum_prod_per_channel(v[0]).expand(1, 1, &[3]);
                        let n = y.sum_prod_per_sample(y).sum().expand(1, 3, &[3]);
                        c * n
                    }),
                )
            },
        },
        Case {
            name: "conv3x3_stride1",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                ];
                (ins, Box::new(|_, v| v[0].conv2d(v[1], 1)))
            },
        },
        Case {
            name: "conv3x3_stride2",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 2, 6, 6], -1.0, 1.0),
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| nn::conv2d(v[0], &layer("c", v[1], Some(v[2])), 2).unwrap()),
                )
            },
        },
        Case {
            name: "conv1x1",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, &[2, 3, 1, 1], -1.0, 1.0),
                ];
                (ins, Box::new(|_, v| v[0].conv2d(v[1], 1)))
            },
        },
        Case {
            name: "deconv_upscale2",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| nn::deconv2d(v[0], &layer("d", v[1], Some(v[2])), 2).unwrap()),
                )
            },
        },
        Case {
            name: "pool_matmul_linear",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| {
                        let pooled = v[0].avg_pool2().global_avg_pool();
                        nn::linear(pooled, &layer("l", v[1], Some(v[2])))
                            .unwrap()
                            .matmul(v[1].reshape(&[4, 3]))
                    }),
                )
            },
        },
        Case {
            name: "slice_concat",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 4, 2, 2], -1.0, 1.0),
                    uniform(r, &[2, 1, 2, 2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| {
                        concat_channels(&[v[0].slice_channels(1, 3), v[1], v[0].slice_channels(0, 1)])
                            * v[0].slice_channels(0, 4).slice_channels(0, 4)
                    }),
                )
            },
        },
        Case {
            name: "batch_renorm_train",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| nn::batch_renorm(v[0], &norm_layer(v[1], v[2], 2), &mut train_ctx()).unwrap()),
                )
            },
        },
        Case {
            name: "batch_renorm_infer",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| nn::batch_renorm(v[0], &norm_layer(v[1], v[2], 2), &mut Ctx::infer()).unwrap()),
                )
            },
        },
        Case {
            name: "layer_norm",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|_, v| nn::layer_norm(v[0], &layer("ln", v[1], Some(v[2]))).unwrap()),
                )
            },
        },
        Case {
            name: "dropout_fixed_mask",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0)];
                (ins, Box::new(|_, v| nn::dropout(v[0], 0.25, &mut train_ctx()).unwrap()))
            },
        },
        Case {
            name: "second_order_conv",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 2, 4, 4], -1.0, 1.0),
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|g, v| {
                        let h = v[0].conv2d(v[1], 2).sigmoid();
                        let y = nn::deconv2d(h, &layer("d", v[2], None), 2).unwrap();
                        let score = (y * y).avg_pool2().sum();
                        let gx = g.grad(score, &[v[0]], true)[0];
                        (gx * gx).sum_per_sample().sqrt()
                    }),
                )
            },
        },
        Case {
            name: "second_order_norms",
            tolerance: PRIMITIVE_TOL,
            coords: None,
            build: |r| {
                let ins = vec![
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[2, 2, 1, 1], -1.0, 1.0),
                ];
                (
                    ins,
                    Box::new(|g, v| {
                        let a = nn::layer_norm(v[0], &layer("ln", v[1], Some(v[2]))).unwrap();
                        let b =
                            nn::batch_renorm(a.conv2d(v[3], 1), &norm_layer(v[1], v[2], 2), &mut train_ctx()).unwrap();
                        let score = (b.sigmoid() * v[0]).global_avg_pool().sum();
                        let gx = g.grad(score, &[v[0]], true)[0];
                        gx * gx
                    }),
                )
            },
        },
    ]
}

pub fn small_generator(class_conditioning: bool) -> Generator {
    Generator::new(GeneratorConfig {
        input_size: 16,
        base_filters: 2,
        num_blocks: 4,
        latent_dim: 4,
        latent_channels: 2,
        dropout_rate: 0.0,
        class_conditioning,
        num_classes: 2,
    })
    .unwrap()
}

pub fn small_critic() -> Critic {
    Critic::new(CriticConfig {
        input_size: 16,
        growth_rate: 2,
        num_dense_blocks: 2,
        layers_per_block: 2,
        dropout_rate: 0.0,
    })
    .unwrap()
}

fn store_inputs(store: &ParameterStore<f64>, perturb: &mut RngHandle) -> Vec<Tensor<f64>> {
    // Freshly initialized biases and norm shifts are zero; move them off the
    // symmetric point so their gradients are exercised.
    store
        .params()
        .map(|(_, t)| Tensor::from_fn(t.shape(), |i| t.data()[i] + perturb.random_range(-0.1..0.1)))
        .collect()
}

pub fn network_cases() -> Vec<Case> {
    vec![
        Case {
            name: "generator_16px",
            tolerance: NETWORK_TOL,
            coords: Some(3),
            build: |r| {
                let gen = small_generator(true);
                let store = gen.init_params::<f64>(r);
                let mut ins = vec![uniform(r, &[2, 3, 16, 16], 0.0, 1.0), gen.sample_latent::<f64>(2, r)];
                ins.extend(store_inputs(&store, r));
                (
                    ins,
                    Box::new(move |_, v| {
                        let p = store.bind_vars(&v[2..]).unwrap();
                        gen.forward(v[0], v[1], Some(&[0, 1]), &p, &mut train_ctx()).unwrap()
                    }),
                )
            },
        },
        Case {
            name: "critic_16px",
            tolerance: NETWORK_TOL,
            coords: Some(3),
            build: |r| {
                let critic = small_critic();
                let store = critic.init_params::<f64>(r);
                let mut ins = vec![
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                ];
                ins.extend(store_inputs(&store, r));
                (
                    ins,
                    Box::new(move |_, v| {
                        let p = store.bind_vars(&v[2..]).unwrap();
                        critic.score(v[0], v[1], &p, &mut train_ctx()).unwrap()
                    }),
                )
            },
        },
        Case {
            name: "critic_objective_with_penalty",
            tolerance: NETWORK_TOL,
            coords: Some(3),
            build: |r| {
                let critic = small_critic();
                let store = critic.init_params::<f64>(r);
                let mut ins = vec![
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                    uniform(r, &[2, 3, 16, 16], 0.0, 1.0),
                ];
                ins.extend(store_inputs(&store, r));
                (
                    ins,
                    Box::new(move |_, v| {
                        let p = store.bind_vars(&v[4..]).unwrap();
                        let real = critic.score(v[0], v[1], &p, &mut train_ctx()).unwrap();
                        let fake = critic.score(v[0], v[2], &p, &mut train_ctx()).unwrap();
                        let gp = gradient_penalty(|x| critic.score(v[0], x, &p, &mut train_ctx()), v[3], 10.0).unwrap();
                        critic_loss(fake, real).unwrap() + gp
                    }),
                )
            },
        },
        Case {
            name: "generator_objective_through_critic",
            tolerance: NETWORK_TOL,
            coords: Some(3),
            build: |r| {
                let gen = small_generator(false);
                let critic = small_critic();
                let gs = gen.init_params::<f64>(r);
                let cs = critic.init_params::<f64>(r);
                let n_gen = gs.num_tensors();
                let mut ins = vec![uniform(r, &[2, 3, 16, 16], 0.0, 1.0), gen.sample_latent::<f64>(2, r)];
                ins.extend(store_inputs(&gs, r));
                ins.extend(store_inputs(&cs, r));
                (
                    ins,
                    Box::new(move |_, v| {
                        let gp = gs.bind_vars(&v[2..2 + n_gen]).unwrap();
                        let cp = cs.bind_vars(&v[2 + n_gen..]).unwrap();
                        let x_g = gen.forward(v[0], v[1], None, &gp, &mut train_ctx()).unwrap();
                        generator_loss(critic.score(v[0], x_g, &cp, &mut train_ctx()).unwrap()).unwrap()
                    }),
                )
            },
        },
    ]
}

/// Runs `case` once per seed and keeps the worst report.
pub fn run_case(case: &Case, seeds: std::ops::Range<u64>) -> CaseResult {
    let mut worst: Option<GradCheckReport> = None;
    let n = seeds.end - seeds.start;
    for seed in seeds {
        let mut rng = stream(seed, &format!("gradcheck-{}", case.name));
        let (inputs, op) = (case.build)(&mut rng);
        let opts = GradCheckOptions {
            max_coords_per_input: case.coords,
            seed,
            ..Default::default()
        };
        let report = grad_check(op, &inputs, case.tolerance, opts);
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_error.is_nan() || report.max_rel_error > w.max_rel_error)
        {
            worst = Some(report);
        }
    }
    let worst = worst.expect("at least one seed");
    CaseResult {
        name: case.name,
        seeds: n as usize,
        passed: worst.max_rel_error < case.tolerance,
        worst,
    }
}
