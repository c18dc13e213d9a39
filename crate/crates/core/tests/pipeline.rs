use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use hmrvit::baselines::{run_ablation, Variant};
use hmrvit::body_model::{body_mesh, BodyTemplate};
use hmrvit::config::{Config, Preset};
use hmrvit::feature_image::{apply_crm, permutation_matrix, FeatureImage};
use hmrvit::metrics::{mpjpe, pa_mpjpe, Similarity};
use hmrvit::numerics::Matrix;
use hmrvit::synthetic_data::{generate_dataset, Dataset};
use hmrvit::training::{train, TrainOptions};

fn small() -> Config {
    Config {
        train_sequences: 4,
        val_sequences: 2,
        batch_size: 2,
        regressor_hidden: 32,
        ..Config::preset(Preset::Toy)
    }
}

#[test]
fn dataset_survives_save_and_load() {
    let data = generate_dataset(&small().data_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.train.features, data.train.features);
    assert_eq!(back.val.mid_mesh, data.val.mid_mesh);
    assert_eq!(back.stub.perm, data.stub.perm);
    assert_eq!(back.template.rest_vertices(), data.template.rest_vertices());
}

#[test]
fn same_seed_same_dataset() {
    let a = generate_dataset(&small().data_config()).unwrap();
    let b = generate_dataset(&small().data_config()).unwrap();
    assert_eq!(a.train.features, b.train.features);
    let c = generate_dataset(&Config { seed: 1, ..small() }.data_config()).unwrap();
    assert_ne!(a.train.features, c.train.features);
}

#[test]
fn ablation_without_training_fills_every_cell() {
    let cfg = Config { epochs: 0, ..small() };
    let data = generate_dataset(&cfg.data_config()).unwrap();
    let table = run_ablation(&cfg, &data, &[0, 1], None).unwrap();
    assert_eq!(table.cells().len(), Variant::ALL.len() + 4);
    assert_eq!(table.rows.len(), 2 * table.cells().len());
    assert!(table.rows.iter().all(|r| r.report.as_ref().is_some_and(|e| e.mpjpe_mm.is_finite())));
    let csv = table.to_csv();
    assert_eq!(csv.lines().filter(|l| l.contains(",median,")).count(), table.cells().len());
}

#[test]
fn one_epoch_keeps_losses_finite() {
    let cfg = Config { epochs: 1, ..small() };
    let data = generate_dataset(&cfg.data_config()).unwrap();
    let s = train(&cfg, &data, &TrainOptions { out_dir: None, quiet: true }).unwrap();
    assert!(s.losses.iter().all(|l| l.is_finite()));
    assert_eq!(s.steps, 2);
    assert_eq!(s.final_eval.n, 2);
}

fn points(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, 3 * n).prop_map(move |v| Matrix::from_vec(n, 3, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pa_mpjpe_ignores_similarity_transforms(
        target in points(24),
        axis in prop::array::uniform3(-3.0f64..3.0),
        scale in 0.2f64..5.0,
        shift in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let t = Similarity {
            scale,
            rotation: *Rotation3::new(Vector3::from(axis)).matrix(),
            translation: Vector3::from(shift),
        };
        prop_assert!(pa_mpjpe(&t.apply(&target), &target).unwrap() < 1e-6);
    }

    #[test]
    fn mpjpe_is_symmetric_and_zero_on_self(a in points(24), b in points(24)) {
        prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        prop_assert!((mpjpe(&a, &b).unwrap() - mpjpe(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn global_rotation_preserves_vertex_distances(axis in prop::array::uniform3(-2.0f64..2.0)) {
        let tmpl = BodyTemplate::procedural(2, 0).unwrap();
        let mut theta = [0.0; 72];
        theta[..3].copy_from_slice(&axis);
        let rest = body_mesh(&tmpl, &[0.0; 72], &[0.0; 10]).unwrap();
        let posed = body_mesh(&tmpl, &theta, &[0.0; 10]).unwrap();
        let dist = |m: &Matrix, i: usize, j: usize| {
            (0..3).map(|c| (m.get(i, c) - m.get(j, c)).powi(2)).sum::<f64>().sqrt()
        };
        for i in (0..rest.rows()).step_by(5) {
            for j in (i + 1..rest.rows()).step_by(7) {
                prop_assert!((dist(&rest, i, j) - dist(&posed, i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_crm_reorders_columns(seed in any::<u64>()) {
        let mut r = hmrvit::numerics::rng::seeded(seed);
        let sigma = hmrvit::numerics::rng::permutation(&mut r, 12);
        let img = FeatureImage::new(hmrvit::numerics::rng::normal_matrix(&mut r, 5, 12, 1.0)).unwrap();
        let out = apply_crm(&img, &permutation_matrix(&sigma)).unwrap();
        let mut a: Vec<Vec<u64>> = (0..12)
            .map(|j| (0..5).map(|t| img.matrix().get(t, j).to_bits()).collect())
            .collect();
        let mut b: Vec<Vec<u64>> = (0..12)
            .map(|j| (0..5).map(|t| out.matrix().get(t, j).to_bits()).collect())
            .collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
