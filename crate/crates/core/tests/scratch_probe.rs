// temporary diagnostic probe — delete before finishing
mod common;

use csrl_core::checkpoint;
use csrl_core::datastore::read_dataset;
use csrl_core::nets::{Nets, ObsMode, TrunkConfig};
use csrl_core::tabletop::{self, Action7, ObjectConfig, TaskKind, TaskSpec};
use std::path::Path;

#[test]
#[ignore]
fn probe_bc_policy() {
    let nets = Nets::new(
        ObsMode::Vector,
        TrunkConfig {
            vector_widths: vec![64, 64],
            ..Default::default()
        },
        1,
    );
    let (agent, _si) =
        checkpoint::load(Path::new("/tmp/csrltest/bc_only/checkpoint_task1.bin"), nets).unwrap();

    // 1. action agreement on dataset transitions
    let ds = read_dataset(Path::new("/tmp/csrltest/press40.bin")).unwrap();
    let mut mse = 0.0f64;
    let mut n = 0;
    for ep in ds.episodes.iter().take(20) {
        for t in ep.transitions.iter().take(20) {
            let a = agent.nets.eval_action(&agent.params, &t.obs, 0).unwrap();
            let mut stored = t.action;
            stored[6] = if stored[6] > 0.5 { 1.0 } else { -1.0 };
            for k in 0..7 {
                let d = (a[k] - stored[k]) as f64;
                mse += d * d;
                n += 1;
            }
        }
    }
    println!("action MSE vs dataset: {:.5} over {} dims", mse / n as f64, n);

    // print one dataset obs/action vs policy output
    let t0 = &ds.episodes[0].transitions[0];
    let a0 = agent.nets.eval_action(&agent.params, &t0.obs, 0).unwrap();
    println!("obs[0]: {:?}", t0.obs);
    println!("stored action: {:?}", t0.action);
    println!("policy action: {:?}", a0);

    // 1b. per-dimension error + ox sensitivity
    let mut dim_mse = [0.0f64; 7];
    let mut n2 = 0;
    for ep in ds.episodes.iter() {
        for t in ep.transitions.iter() {
            let a = agent.nets.eval_action(&agent.params, &t.obs, 0).unwrap();
            let mut stored = t.action;
            stored[6] = if stored[6] > 0.5 { 1.0 } else { -1.0 };
            for k in 0..7 {
                let d = (a[k] - stored[k]) as f64;
                dim_mse[k] += d * d;
            }
            n2 += 1;
        }
    }
    for k in 0..7 {
        println!("dim {k}: rms err {:.4}", (dim_mse[k] / n2 as f64).sqrt());
    }
    let base = vec![0.0f32, 20.0, 15.0, 1.0, 0.0, 27.0, 0.0, 0.0, 0.0, 0.0];
    let mut shifted = base.clone();
    shifted[4] = 4.0; // move object 4 cm in +x
    let a_base = agent.nets.eval_action(&agent.params, &base, 0).unwrap();
    let a_shift = agent.nets.eval_action(&agent.params, &shifted, 0).unwrap();
    println!("action at ox=0:  {:?}", &a_base[..3]);
    println!("action at ox=4:  {:?}", &a_shift[..3]);

    // 2. rollout trajectory from a central config
    let spec = TaskSpec::new(TaskKind::PressButton, 40.0, 10.0, ObsMode::Vector);
    let (mut state, mut obs) = tabletop::reset(&spec, ObjectConfig { x: 0.0, y: 27.0 }).unwrap();
    println!("--- rollout ---");
    for step in 0..20 {
        let a = agent.nets.eval_action(&agent.params, &obs, 0).unwrap();
        let (next, next_obs, r, _) = tabletop::step(&spec, &state, &Action7::from_array(&a)).unwrap();
        println!(
            "step {step}: gripper ({:+.2}, {:+.2}, {:+.2}) action ({:+.2}, {:+.2}, {:+.2}, g {:+.2}) reward {r}",
            state.gripper[0], state.gripper[1], state.gripper[2], a[0], a[1], a[2], a[6]
        );
        state = next;
        obs = next_obs;
    }
}
