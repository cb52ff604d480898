use nalgebra::Vector3;
use quadrgp::mpc::{MpcController, OcpConfig, ReferenceWindow};
use quadrgp::sim::{plant_step, run_episode, SimConfig, Variant};
use quadrgp::trajectory::{fit_polynomial, random_waypoints, sample_trajectory, YawMode};
use quadrgp::{ControlInput, DragModel, QuadParams, QuadState};

#[test]
fn drag_free_plant_gives_zero_residuals() {
    let quad = QuadParams::default();
    let wp = random_waypoints(10.0, 4, 3).unwrap();
    let poly = fit_polynomial(&wp, 3.0, 5.0).unwrap();
    let traj = sample_trajectory(&poly, 100.0, YawMode::Velocity, &quad).unwrap();
    let cfg = SimConfig { drag: DragModel::none(), variant: Variant::Rgp, ..SimConfig::default() };
    let ep = run_episode(&traj, &cfg).unwrap();
    assert!(!ep.failed());
    assert!(ep.observations.len() + 1 >= traj.len());
    let worst = ep.observations.iter().map(|o| o.a_tilde.norm()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "largest residual {worst}");
}

#[test]
fn warm_started_iterations_settle() {
    let quad = QuadParams::default();
    let cfg = SimConfig { drag: DragModel::none(), ..SimConfig::default() };
    let ocp = OcpConfig::default();
    let mut mpc = MpcController::new(ocp.clone(), quad.clone(), None, cfg.control_dt).unwrap();
    let target = QuadState::at_rest(Vector3::new(0.3, -0.2, 10.1));
    let reference = ReferenceWindow::hover(&target, &quad, ocp.n_h);
    let mut x = QuadState::at_rest(Vector3::new(0.0, 0.0, 10.0));
    let mut kkt = vec![];
    for _ in 0..600 {
        let sol = mpc.solve(&x, &reference).unwrap();
        kkt.push(sol.kkt_residual);
        let u = ControlInput::saturating(sol.first_input().into());
        for _ in 0..10 { x = plant_step(&x, &u, &cfg).unwrap(); }
    }
    let tail = &kkt[500..];
    assert!(tail.iter().all(|k| *k < 1e-2 * kkt[0]), "{tail:?}");
    assert!((x.p_w - target.p_w).norm() < 1e-4);
}
