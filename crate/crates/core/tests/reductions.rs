use ndarray::Axis;
use tdmtl_core::dataset::{kfold_split, Cohort};
use tdmtl_core::distill::EmbeddingConfig;
use tdmtl_core::gbdt::GbdtConfig;
use tdmtl_core::mtl::{train_mtl, MtlConfig, MtlModel, SingleTaskNet};
use tdmtl_core::pipeline::{
    build_student, distill_teachers, train_task_gbdts, FoldSeeds, PipelineConfig,
};
use tdmtl_core::synth::{generate_cohort, SynthConfig};

fn cohort() -> Cohort {
    generate_cohort(&SynthConfig {
        n_task1_pos: 150,
        n_task2_pos: 120,
        n_negative: 90,
        n_features: 24,
        n_informative_shared: 4,
        n_informative_per_task: 3,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn config() -> PipelineConfig {
    PipelineConfig {
        gbdt: GbdtConfig {
            num_trees: 10,
            max_leaves: 6,
            min_samples_leaf: 5,
            ..Default::default()
        },
        embedding: EmbeddingConfig {
            dim: 5,
            hidden: 12,
            epochs: 5,
            ..Default::default()
        },
        mtl: MtlConfig {
            epochs: 12,
            hidden: 16,
            batch_size: 32,
            ..Default::default()
        },
        top_k: Some(8),
        ..Default::default()
    }
}

#[test]
fn gamma_zero_matches_plain_on_union() {
    let c = cohort();
    let fold = &kfold_split(&c.y, 4, 3).unwrap()[1];
    let seeds = FoldSeeds::new(3, 1);
    let cfg = config();
    let gbdts = train_task_gbdts(&c, &fold.train_rows, &cfg.gbdt, &seeds).unwrap();
    let teachers = distill_teachers(&c, &fold.train_rows, gbdts, &cfg.embedding, &seeds).unwrap();
    let mtl_cfg = MtlConfig {
        seed: 77,
        ..cfg.mtl.clone()
    }
    .with_gamma(0.0, 2);
    let mut cod = build_student(&c, &teachers, &cfg, 77).unwrap();
    assert!(cod.distills());
    let h_cod = train_mtl(
        &mut cod,
        &c.x,
        &c.y,
        &fold.train_rows,
        &teachers.targets,
        &mtl_cfg,
    )
    .unwrap();

    let mut plain = MtlModel::plain(
        c.n_features(),
        cod.feature_union.clone(),
        2,
        mtl_cfg.hidden,
        77,
    )
    .unwrap();
    let h_plain = train_mtl(&mut plain, &c.x, &c.y, &fold.train_rows, &[], &mtl_cfg).unwrap();

    assert_eq!(h_cod.len(), mtl_cfg.epochs);
    for e in 0..mtl_cfg.epochs {
        assert!(
            (h_cod.total[e] - h_plain.total[e]).abs() <= 1e-10,
            "epoch {e}"
        );
        for j in 0..2 {
            assert!((h_cod.ce[e][j] - h_plain.ce[e][j]).abs() <= 1e-10);
        }
    }
    let test = c.x.select(Axis(0), &fold.test_rows);
    let a = cod.logits(test.view()).unwrap();
    let b = plain.logits(test.view()).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-10));
}

#[test]
fn single_task_plain_matches_mlp() {
    let c = cohort();
    let y1 = c.y.select(Axis(1), &[0]);
    let fold = &kfold_split(&c.y, 3, 8).unwrap()[0];
    let cfg = MtlConfig {
        seed: 5,
        ..config().mtl
    };
    let l = c.n_features();

    let mut plain = MtlModel::plain(l, (0..l).collect(), 1, cfg.hidden, cfg.seed).unwrap();
    let h_plain = train_mtl(&mut plain, &c.x, &y1, &fold.train_rows, &[], &cfg).unwrap();
    let mut mlp = SingleTaskNet::mlp(l, cfg.hidden, cfg.seed).unwrap();
    let h_mlp = mlp
        .train(&c.x, &c.labels(0), &fold.train_rows, &cfg)
        .unwrap();

    assert_eq!(h_mlp.len(), cfg.epochs);
    for e in 0..cfg.epochs {
        assert!(
            (h_plain.total[e] - h_mlp[e]).abs() <= 1e-10,
            "epoch {e}: {} vs {}",
            h_plain.total[e],
            h_mlp[e]
        );
    }
}

#[test]
fn training_reduces_objective() {
    let c = cohort();
    let rows: Vec<usize> = (0..c.n_rows()).collect();
    let cfg = MtlConfig {
        epochs: 30,
        ..config().mtl
    };
    let mut m = MtlModel::plain(
        c.n_features(),
        (0..c.n_features()).collect(),
        2,
        cfg.hidden,
        1,
    )
    .unwrap();
    let h = train_mtl(&mut m, &c.x, &c.y, &rows, &[], &cfg).unwrap();
    assert!(h.total.last().unwrap() < h.total.first().unwrap());
    assert!(h.total.iter().all(|v| v.is_finite()));
}
