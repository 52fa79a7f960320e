//! Shipped experiment recipes, one per figure.

use super::{Axis, ExperimentConfig, InitList, InitSpec, Kind, SimSettings};
use crate::ode::IntegrationPlan;
use crate::order_params::{ModelConfig, VariantConfig};

/// (name, description)
pub const PRESETS: [(&str, &str); 9] = [
    ("fig2", "theory vs 10-run simulation, N=1000, K=M=3, P=V=100, eta_J=6, eta_w=4"),
    ("fig3a", "theory from Q=I/2, R=1e-12, T=diag(1,2,3); eta_J=3, eta_w=3 (plateau)"),
    ("fig3b", "as fig3a with eta_w=9 (specialization)"),
    ("fig4", "alpha_tilde heatmaps over eta_J x eta_w for K=3..9, alpha_final=450"),
    ("fig5", "overparameterized K=6, M=3, eta_J=3, eta_w=9"),
    ("fig6", "teacher variability gamma in {0.9, 0.95, 0.99, 1}, eta_J=6, eta_w=8"),
    ("appC", "simulated ensembles at V in {20, 50, 100}, N=500"),
    ("appF", "linear activation, three initial conditions, eta_J=3, eta_w=0.5"),
    ("validate", "closed-form integrals vs quadrature, 1000 draws per kind"),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

fn model(n: usize, k: usize, eta_j: f64, eta_w: f64) -> ModelConfig {
    ModelConfig {
        n,
        k,
        m: 3,
        p: 100,
        v: 100,
        eta_w,
        eta_j,
    }
}

fn base(kind: Kind, model: ModelConfig) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        model: Some(model),
        variant: VariantConfig::default(),
        plan: None,
        init: None,
        seeds: Vec::new(),
        axes: Vec::new(),
        threshold: None,
        sim: SimSettings::default(),
        validate: None,
        output: None,
    }
}

fn axis(name: &str, values: Vec<f64>) -> Axis {
    Axis {
        name: name.into(),
        values,
    }
}

fn linear_init(r11: f64, r31: f64) -> InitSpec {
    let mut r = vec![vec![1e-12; 3]; 3];
    r[0][0] = r11;
    r[2][0] = r31;
    InitSpec::Explicit {
        q: (0..3).map(|i| (0..3).map(|j| if i == j { 0.5 } else { 0.0 }).collect()).collect(),
        r,
        t: (0..3).map(|i| (0..3).map(|j| if i == j { (i + 1) as f64 } else { 0.0 }).collect()).collect(),
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let cfg = match name {
        "fig2" => {
            let mut c = base(Kind::Compare, model(1000, 3, 6.0, 4.0));
            c.seeds = (0..10).collect();
            c.sim.matched_init = true;
            c.plan = Some(IntegrationPlan::rk4(20.0, 0.01, 0.05));
            c
        }
        "fig3a" => base(Kind::Theory, model(1000, 3, 3.0, 3.0)),
        "fig3b" => base(Kind::Theory, model(1000, 3, 3.0, 9.0)),
        "fig4" => {
            let mut c = base(Kind::Sweep, model(1000, 3, 3.0, 9.0));
            c.plan = Some(IntegrationPlan::rkf45(super::SWEEP_ALPHA_MAX, 1e-8, 0.5));
            c.axes = vec![
                axis("K", (3..=9).map(f64::from).collect()),
                axis("eta_J", (1..=8).map(f64::from).collect()),
                axis("eta_w", (1..=8).map(|i| 3.0 * f64::from(i)).collect()),
            ];
            c
        }
        "fig5" => {
            let mut c = base(Kind::Theory, model(1000, 6, 3.0, 9.0));
            c.plan = Some(IntegrationPlan::rkf45(1000.0, 1e-8, 0.5));
            c
        }
        "fig6" => {
            let mut c = base(Kind::Theory, model(1000, 3, 6.0, 8.0));
            c.axes = vec![axis("gamma", vec![0.9, 0.95, 0.99, 1.0])];
            c
        }
        "appC" => {
            let mut c = base(Kind::Simulate, model(500, 3, 6.0, 4.0));
            c.seeds = (0..10).collect();
            c.sim.matched_init = true;
            c.sim.eps_tasks = 0;
            c.plan = Some(IntegrationPlan::rk4(5.0, 0.01, 0.25));
            c.axes = vec![axis("V", vec![20.0, 50.0, 100.0])];
            c
        }
        "appF" => {
            let mut c = base(Kind::Theory, model(1000, 3, 3.0, 0.5));
            c.variant = VariantConfig::linear();
            c.init = Some(InitList::Many(vec![
                linear_init(1e-12, 1e-12),
                linear_init(1.1e-12, 1e-12),
                linear_init(1.1e-12, 1.2e-12),
            ]));
            c
        }
        "validate" => ExperimentConfig {
            model: None,
            validate: Some(super::ValidateSettings::default()),
            ..base(Kind::ValidateIntegrals, model(1000, 3, 1.0, 1.0))
        },
        _ => return None,
    };
    Some(cfg)
}
