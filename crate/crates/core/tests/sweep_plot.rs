use bat_core::experiment::config::DataSource;
use bat_core::experiment::plot::read_svg_series;
use bat_core::experiment::results::{aggregate, read_csv, to_csv, SPLIT_TEST};
use bat_core::experiment::{emit_plots, prepare_data, sweep, train_all, SweepGrid, TrainConfig};
use bat_core::Task;

fn base(task: Task) -> TrainConfig {
    let mut c = TrainConfig::new(task);
    c.data = DataSource::Synthetic {
        train: 48,
        test: 16,
        seed: 3,
    };
    c.validation_size = 8;
    c.hidden = 8;
    c.ff = 16;
    c.layers = 1;
    c.dataset = "toy".into();
    c
}

#[test]
fn eight_epoch_sweep_plots_five_lines_of_six_points() {
    let cfg = base(Task::Ae);
    let data = prepare_data(&cfg).unwrap();
    let grid = SweepGrid {
        epochs_min: 3,
        epochs_max: 8,
        dropouts: vec![0.1],
        epsilons: vec![0.01, 0.1, 1.0, 2.0],
        seeds: vec![1, 2],
        table_epochs: 4,
    };
    let result = sweep(&grid, &cfg, &data).unwrap();
    let plots = emit_plots(&result.rows, 0.1).unwrap();
    assert_eq!(plots.len(), 1);
    let series = read_svg_series(&plots[0].1).unwrap();
    assert_eq!(series.len(), 5);
    let cells = aggregate(&result.rows, SPLIT_TEST, "f1");
    for (line, eps) in series.iter().zip(grid.epsilon_axis()) {
        assert_eq!(line.points.iter().map(|p| p.0).collect::<Vec<_>>(), [3, 4, 5, 6, 7, 8]);
        for &(epochs, value) in &line.points {
            let cell = cells
                .iter()
                .find(|c| c.key.epochs == epochs && c.key.epsilon() == eps)
                .unwrap();
            assert_eq!(value, cell.mean());
        }
    }
    assert_eq!(emit_plots(&result.rows, 0.1).unwrap(), plots);
}

#[test]
fn cell_mean_is_exact_mean_of_seeds() {
    let cfg = base(Task::Asc);
    let data = prepare_data(&cfg).unwrap();
    let grid = SweepGrid {
        epochs_min: 1,
        epochs_max: 2,
        dropouts: vec![0.1],
        epsilons: vec![0.5],
        seeds: vec![1, 2, 3],
        table_epochs: 2,
    };
    let result = sweep(&grid, &cfg, &data).unwrap();
    for cell in aggregate(&result.rows, SPLIT_TEST, "accuracy") {
        let raw: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| {
                r.split == SPLIT_TEST
                    && r.metric == "accuracy"
                    && r.epochs == cell.key.epochs
                    && r.epsilon == cell.key.epsilon()
            })
            .map(|r| r.value)
            .collect();
        assert_eq!(raw.len(), 3);
        assert_eq!(cell.mean(), raw.iter().sum::<f64>() / 3.0);
    }
}

#[test]
fn baseline_rows_match_a_standalone_baseline_run() {
    let cfg = base(Task::Ae);
    let data = prepare_data(&cfg).unwrap();
    let grid = SweepGrid {
        epochs_min: 2,
        epochs_max: 3,
        dropouts: vec![0.1],
        epsilons: vec![1.0],
        seeds: vec![4, 5],
        table_epochs: 3,
    };
    let result = sweep(&grid, &cfg, &data).unwrap();
    let mut alone = cfg.clone();
    alone.epochs = 3;
    alone.epsilon = 0.0;
    alone.seeds = vec![4, 5];
    let (_, rows) = train_all(&alone, &data).unwrap();
    let standalone: Vec<_> = rows.into_iter().filter(|r| r.epochs >= 2).collect();
    let from_sweep: Vec<_> = result.rows.iter().filter(|r| r.epsilon == 0.0).cloned().collect();
    assert_eq!(to_csv(&from_sweep), to_csv(&standalone));
}

#[test]
fn rerunning_a_sweep_reproduces_its_files() {
    let cfg = base(Task::Asc);
    let data = prepare_data(&cfg).unwrap();
    let grid = SweepGrid {
        epochs_min: 1,
        epochs_max: 2,
        dropouts: vec![0.0, 0.1],
        epsilons: vec![0.1],
        seeds: vec![1, 2],
        table_epochs: 2,
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    sweep(&grid, &cfg, &data).unwrap().write(&cfg, &a).unwrap();
    sweep(&grid, &cfg, &data).unwrap().write(&cfg, &b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "toy-asc-dropout.svg"));
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let rows = read_csv(&a.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), sweep(&grid, &cfg, &data).unwrap().rows.len());
}
