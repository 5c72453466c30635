use ecgli::fem::{assemble_mass, assemble_stiffness, build_rect_grid, ConductivityField, Tensor};
use ecgli::ionic::{AlievPanfilov, IonicParamField};
use ecgli::monodomain::{Simulator, StimulusProtocol, StimulusShape, Trajectory};

fn strip_run(sigma_l: f64) -> Trajectory {
    let (nx, ny) = (200, 2);
    let grid = build_rect_grid(nx, ny, 2.0, 0.04).unwrap();
    let fibers = vec![[1.0, 0.0, 0.0]; grid.n_elements()];
    let field = ConductivityField::transversely_isotropic(&grid, sigma_l, 2.5e-4, &fibers).unwrap();
    let mass = assemble_mass(&grid);
    let stiffness = assemble_stiffness(&grid, &field).unwrap();
    let model = AlievPanfilov::default();
    let params = IonicParamField::uniform(&model, grid.n_nodes());
    let stim = StimulusProtocol {
        center: [0.0, 0.0, 0.0],
        radius: 0.1,
        amplitude: 100.0,
        onset: 0.0,
        duration: 1.0,
        shape: StimulusShape::Slab { axis: 0 },
        taper: 0.0,
    };
    let sim = Simulator::new(&grid, &mass, &stiffness, 1.0, &model, &params, Some(&stim), 0.05).unwrap();
    Trajectory::collect(&sim, 160.0, 2).unwrap()
}

#[test]
fn conduction_velocity_scales_with_sqrt_sigma() {
    // Travel time between x = 0.5 and x = 1.5 along the bottom row.
    let travel = |traj: &Trajectory| {
        let act = traj.activation_times(-40.0);
        act[150].expect("x = 1.5 activated") - act[50].expect("x = 0.5 activated")
    };
    let slow = travel(&strip_run(1.2e-3));
    let fast = travel(&strip_run(4.8e-3));
    let ratio = slow / fast;
    assert!((ratio - 2.0).abs() <= 0.15 * 2.0, "travel time ratio {ratio}");
}

#[test]
fn imex_is_first_order_in_time() {
    let grid = build_rect_grid(16, 4, 1.0, 0.25).unwrap();
    let mass = assemble_mass(&grid);
    let stiffness = assemble_stiffness(&grid, &ConductivityField::uniform(&grid, Tensor::scalar(2, 2e-3))).unwrap();
    let model = AlievPanfilov::default();
    let params = IonicParamField::uniform(&model, grid.n_nodes());
    let stim = StimulusProtocol::ball([0.0, 0.0, 0.0], 0.2, 100.0, 0.0, 1.0);
    let run = |dt: f64| {
        let sim = Simulator::new(&grid, &mass, &stiffness, 1.0, &model, &params, Some(&stim), dt).unwrap();
        let steps = (20.0 / dt).round() as usize;
        let mut state = sim.initial_state();
        for _ in 0..steps {
            state = sim.step(&state).unwrap();
        }
        state.v
    };
    let reference = run(0.0125);
    let err = |v: Vec<f64>| v.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let e_coarse = err(run(0.2));
    let e_fine = err(run(0.1));
    let order = (e_coarse / e_fine).log2();
    assert!((0.8..=1.2).contains(&order), "observed order {order} ({e_coarse:.3e} → {e_fine:.3e})");
}
