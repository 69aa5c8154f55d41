use dcmtl::data::{generate_worlds, World};
use dcmtl::tensor::{grad_check_params, read_checkpoint, write_checkpoint, DEFAULT_EPS};
use dcmtl::training::task_loss;
use dcmtl::{Forward, Model, ModelConfig, Tape, TaskKind};

fn small() -> Model {
    Model::new(
        ModelConfig {
            dim: 8,
            depth: 4,
            embed_dim: 6,
            attention_maps: 2,
            ..ModelConfig::default()
        },
        21,
    )
    .unwrap()
}

fn bound_names(model: &Model, task: TaskKind, tap: usize, batch: &[&World]) -> Vec<String> {
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    task_loss(&mut fwd, model, task, tap, batch).unwrap();
    tape.bound_params().map(|(id, _)| model.params.name(id).to_string()).collect()
}

#[test]
fn each_task_binds_only_its_path() {
    let model = small();
    let worlds = generate_worlds(4, 3);
    let batch: Vec<&World> = worlds.iter().collect();
    for (task, tap) in [(TaskKind::Icr, 2), (TaskKind::Vqa, 4), (TaskKind::Vg, 1)] {
        let names = bound_names(&model, task, tap, &batch);
        let own = task.name();
        for n in &names {
            let head = n.split('.').next().unwrap();
            assert!(head == "enc" || head == own, "{task} touched {n}");
            if let Some(rest) = n.strip_prefix("enc.dcl.") {
                let layer: usize = rest.split('.').next().unwrap().parse().unwrap();
                assert!(layer <= tap, "{task} at tap {tap} touched {n}");
            }
        }
        assert!(names.iter().any(|n| n.starts_with(&format!("enc.dcl.{tap}."))));
        assert!(names.iter().any(|n| n.starts_with(own)));
    }
}

#[test]
fn off_path_gradients_are_zero() {
    let model = small();
    let worlds = generate_worlds(4, 2);
    let batch: Vec<&World> = worlds.iter().collect();
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &model.params);
    let loss = task_loss(&mut fwd, &model, TaskKind::Vg, 2, &batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = model.params.clone();
    store.zero_grads();
    store.accumulate(&tape, &grads).unwrap();
    for (id, name, t) in store.iter() {
        if !tape.is_bound(id) {
            assert!(t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name}");
        }
    }
}

#[test]
fn task_losses_match_finite_differences() {
    let model = small();
    let worlds = generate_worlds(8, 2);
    let batch: Vec<&World> = worlds.iter().collect();
    for (task, tap) in [(TaskKind::Icr, 3), (TaskKind::Vqa, 2), (TaskKind::Vg, 4)] {
        let ids: Vec<_> = {
            let mut tape = Tape::new();
            let mut fwd = Forward::eval(&mut tape, &model.params);
            task_loss(&mut fwd, &model, task, tap, &batch).unwrap();
            tape.bound_params().map(|(id, _)| id).collect()
        };
        let report = grad_check_params(
            &model.params,
            &ids,
            |t, p| {
                let mut fwd = Forward::eval(t, p);
                task_loss(&mut fwd, &model, task, tap, &batch)
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_error < 1e-4, "{task}: {report:?}");
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let model = small();
    let bytes = write_checkpoint(&model.params);
    let mut other = Model::new(model.config.clone(), 99).unwrap();
    assert_ne!(other.params.checksum(), model.params.checksum());
    other.load_params(&read_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(write_checkpoint(&other.params), bytes);

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() / 2);
    assert!(read_checkpoint(&truncated).is_err());
    let bigger = Model::new(ModelConfig { dim: 10, ..model.config.clone() }, 1).unwrap();
    let mut wrong = small();
    assert!(wrong.load_params(&bigger.params).is_err());
}
