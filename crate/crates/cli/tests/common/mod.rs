use serde_json::{json, Value};

/// Small but complete parameter records for every subcommand.
pub fn small_configs() -> Vec<(&'static str, Value)> {
    let adam = json!({"adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "bias_correction": false}});
    vec![
        ("solve-fd", json!({"a": 2.0, "kappa": 0.5, "ell": 1.0, "n": 16})),
        (
            "solve-spectral",
            json!({"a": 1.0, "kappa": 1.0, "ell": 1.0, "n": 6, "points": "gauss_lobatto", "check_points": 11,
                   "least_squares": {"iters": 50, "lr": 0.05, "lambda": 1.0}}),
        ),
        (
            "train-mlp",
            json!({"hidden": [8], "activation": "tanh", "target": "sin_pi", "n_train": 16, "n_val": 9, "epochs": 5,
                   "lr": 0.01, "n_batch": 4, "optimizer": adam, "init": null}),
        ),
        (
            "train-pinn",
            json!({"a": 1.0, "kappa": 1.0, "ell": 1.0, "hidden": [6], "activation": "tanh", "n_points": 8, "lambda_b": 10.0,
                   "iters": 20, "lr": 0.001, "optimizer": adam, "n_out": 11}),
        ),
        (
            "train-deeponet",
            json!({"sensors": 8, "latent": 4, "branch_hidden": [], "branch_activation": "linear", "trunk_hidden": [8],
                   "trunk_activation": "tanh", "modes": 2, "scale": 1.0, "n_train_functions": 6, "n_train_points": 4,
                   "n_test_functions": 2, "n_test_points": 5, "epochs": 5, "lr": 0.001, "n_batch": 2}),
        ),
        (
            "train-fno",
            json!({"n": 16, "forcing_modes": 2, "n_train": 4, "n_test": 2, "width": 4, "layers": 1, "k": 3,
                   "activation": "tanh", "epochs": 3, "lr": 0.001, "n_batch": 2}),
        ),
        (
            "train-node",
            json!({"hidden": [4], "activation": "tanh", "t_final": 1.0, "steps": 4, "method": "rk4", "n_samples": 8,
                   "epochs": 3, "lr": 0.01, "n_batch": 2}),
        ),
        (
            "train-wgan",
            json!({"target": {"kind": "gaussian", "mean": [1.0, 1.0], "cov": [[0.25, 0.0], [0.0, 0.25]]},
                   "latent_dim": 2, "generator_hidden": [4], "critic_hidden": [4], "activation": "tanh", "n_data": 32,
                   "epochs": 5,
                   "settings": {"lambda": 10.0, "critic_steps": 2, "lr_critic": 0.001, "lr_generator": 0.001, "batch_size": 8,
                                "optimizer": "gd", "generator_schedule": "constant"},
                   "n_samples": 10, "n_eval": 200, "clip": 3.0}),
        ),
        (
            "conv-demo",
            json!({"signal": [1.0, 2.0, 3.0, 4.0], "kernel": [1.0, 0.0, -1.0], "pad": 1, "strides": [1, 2],
                   "transpose_input": [1.0, 2.0], "transpose_kernel": [1.0, 2.0, 3.0], "transpose_stride": 2,
                   "max_kernel": 4, "max_stride": 3, "spacings": [0.1, 0.05]}),
        ),
        ("sgd-toy", json!({"lr": 0.4, "lr_schedule": "inverse_sqrt", "steps": 200, "start": [-1.0, 2.0], "tail": 50})),
        ("gradcheck", json!({"count": 3, "first_order_tol": 1e-5, "second_order_tol": 1e-4})),
    ]
}
