use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use lowshot::decoder::{init_params, Descriptor, LatentCode};
use lowshot::harness::dataset::{load_dataset, split_dataset, tensor_to_rgb, LabeledImage};
use lowshot::harness::plot::{curves, render_svg};
use lowshot::harness::results::{aggregate, parse_rows, read_rows, rows_to_csv};
use lowshot::harness::sweep::{grayscale, run_colorization, DatasetSource, SyntheticKind};
use lowshot::harness::*;
use lowshot::invert::{InversionConfig, UntrainedConfig};
use lowshot::losses::psnr;
use lowshot::operators::luma_operator;
use lowshot::pretrain::LossKind;
use lowshot::{Error, ExecMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(dir: &Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))).save(dir.join(name)).unwrap();
}

#[test]
fn directory_loading_is_deterministic_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "white.png", 128, 128, |_, _| [255, 255, 255]);
    write_png(dir.path(), "black.png", 128, 128, |_, _| [0, 0, 0]);
    write_png(dir.path(), "grad.png", 160, 128, |x, y| [(x % 256) as u8, (y * 2) as u8, 40]);
    fs::write(dir.path().join("notes.txt"), b"not an image").unwrap();

    let a = load_dataset(dir.path(), 64).unwrap();
    let b = load_dataset(dir.path(), 64).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.images, b.images);
    assert_eq!(a.images.len(), 3);
    assert_eq!(a.manifest.skipped.len(), 1);
    assert_eq!(a.manifest.skipped[0].file, "notes.txt");
    for img in &a.images {
        assert_eq!(img.tensor.shape(), &[3, 64, 64]);
        assert!(img.tensor.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let file_of = |id: &str| a.manifest.entries.iter().find(|e| e.digest == id).unwrap().file.clone();
    for img in &a.images {
        match file_of(&img.id).as_str() {
            "white.png" => assert!(img.tensor.data().iter().all(|&v| v == 1.0)),
            "black.png" => assert!(img.tensor.data().iter().all(|&v| v == -1.0)),
            _ => {}
        }
    }
    let ids: Vec<&str> = a.images.iter().map(|i| i.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let split = split_dataset(a, 1, 2).unwrap();
    assert_eq!(split.shots.len(), 1);
    assert_eq!(split.tests.len(), 2);
}

#[test]
fn empty_directory_and_overlap_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Config(_))));

    write_png(dir.path(), "a.png", 32, 32, |_, _| [10, 20, 30]);
    fs::copy(dir.path().join("a.png"), dir.path().join("b.png")).unwrap();
    let ds = load_dataset(dir.path(), 32).unwrap();
    let err = split_dataset(ds, 1, 1).unwrap_err();
    assert!(err.to_string().contains("both"), "{err}");
}

fn tiny_bank(d: Descriptor, shots: &[usize], losses: &[LossKind]) -> ModelBank {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let latents: Vec<LatentCode<f32>> = (0..6).map(|_| LatentCode::standard_normal(d.latent_dim, &mut rng)).collect();
    let mut bank = ModelBank::new();
    for (i, &s) in shots.iter().enumerate() {
        for (j, &l) in losses.iter().enumerate() {
            let params = init_params(100 + 10 * i as u64 + j as u64, d).unwrap();
            bank.insert(s, l, Model::new(params, &latents).unwrap());
        }
    }
    bank
}

fn tiny_spec(task: Task, out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        task,
        ratios: vec![0.1],
        shots: vec![5],
        losses: vec![LossKind::Mmd],
        test_images: 2,
        descriptor: Descriptor::desk(),
        dataset: Some(DatasetSource::Synthetic {
            generator: SyntheticKind::Blobs,
            count: 7,
            seed: 1,
        }),
        output_dir: out.to_path_buf(),
        record_wall_time: false,
        inversion: InversionConfig {
            stage1_iterations: 10,
            stage2_iterations: 5,
            ..Default::default()
        },
        untrained: UntrainedConfig {
            iterations: Some(5),
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn sweep_row_count_and_resume_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(Task::Cs, dir.path());
    let data = spec.load_data().unwrap();
    let bank = tiny_bank(spec.descriptor, &spec.shots, &spec.losses);
    let csv = dir.path().join("results.csv");
    let opts = SweepOptions {
        workers: 1,
        ..SweepOptions::new(&csv)
    };
    let first = run_cs_sweep(&spec, &bank, &data.tests, &opts).unwrap();
    assert!(first.complete());
    assert_eq!(first.rows.len(), 4);
    assert_eq!(first.rows.iter().filter(|r| r.method == Method::Untrained).count(), 2);
    let bytes = fs::read(&csv).unwrap();

    let again = run_cs_sweep(&spec, &bank, &data.tests, &opts).unwrap();
    assert_eq!(again.resumed, 4);
    assert!(again.records.is_empty());
    assert_eq!(fs::read(&csv).unwrap(), bytes);
    assert_eq!(read_rows(&csv).unwrap(), first.rows);
}

#[test]
fn sweep_with_missing_model_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        shots: vec![5, 10],
        dataset: Some(DatasetSource::Synthetic {
            generator: SyntheticKind::Blobs,
            count: 12,
            seed: 1,
        }),
        ..tiny_spec(Task::Cs, dir.path())
    };
    let data = spec.load_data().unwrap();
    let bank = tiny_bank(spec.descriptor, &[5], &[LossKind::Mmd]);
    let err = run_cs_sweep(&spec, &bank, &data.tests, &SweepOptions::new(dir.path().join("r.csv"))).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint { shots: 10, .. }));
    assert!(err.to_string().contains("mmd"));

    let spec = ExperimentSpec {
        checkpoint_dir: dir.path().join("none"),
        ..spec
    };
    let err = ModelBank::load(&spec).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint { shots: 5, .. }));
}

fn fake_rows() -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (k, ratio) in [0.05, 0.1, 0.2].into_iter().enumerate() {
        for img in 0..3 {
            for (method, shots, loss) in [(Method::Untrained, 0, "none"), (Method::Lowshot, 25, "mmd")] {
                rows.push(ResultRow {
                    task: "cs".into(),
                    ratio,
                    shots,
                    loss: loss.into(),
                    method,
                    seed: 0,
                    image_id: format!("img{img}"),
                    psnr: 15.0 + 3.0 * k as f64 + img as f64 + shots as f64 / 5.0,
                    wall_ms: 1,
                });
            }
        }
    }
    rows
}

#[test]
fn plot_has_one_polyline_per_curve() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, rows_to_csv(&fake_rows()).unwrap()).unwrap();
    let out = dir.path().join("p.svg");
    let cs = emit_plot(&csv, &out, &AxesSpec::default()).unwrap();
    assert_eq!(cs.len(), 2);
    let svg = fs::read_to_string(&out).unwrap();
    let polylines: Vec<&str> = svg.lines().filter(|l| l.contains("<polyline")).collect();
    assert_eq!(polylines.len(), 2);
    for p in polylines {
        let pts = p.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 3);
    }
    assert_eq!(svg.matches("class=\"errorbar\"").count(), 6);
    let again = render_svg(&curves(&fake_rows(), None), &AxesSpec::default());
    assert_eq!(again, svg);
}

#[test]
fn plot_of_empty_csv_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, rows_to_csv(&[]).unwrap()).unwrap();
    let out = dir.path().join("p.svg");
    assert!(emit_plot(&csv, &out, &AxesSpec::default()).is_err());
    assert!(!out.exists());
}

#[test]
fn malformed_rows_report_their_line() {
    let mut text = String::from_utf8(rows_to_csv(&fake_rows()[..2]).unwrap()).unwrap();
    text.push_str("cs,0.1,5,mmd,lowshot,0,img9,not-a-number,3\n");
    let err = parse_rows(&text).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn aggregates_match_recomputation() {
    let rows = fake_rows();
    let aggs = aggregate(&rows);
    assert_eq!(aggs.len(), 6);
    for a in &aggs {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.ratio == a.ratio && r.method == a.method && r.shots == a.shots)
            .map(|r| r.psnr)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert_eq!(a.count, 3);
        assert!((a.mean_psnr - mean).abs() < 1e-9);
        assert!((a.std_psnr - std).abs() < 1e-9);
    }
}

#[test]
fn colorization_grid_rows_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        dataset: Some(DatasetSource::Synthetic {
            generator: SyntheticKind::Tinted,
            count: 7,
            seed: 2,
        }),
        ..tiny_spec(Task::Colorization, dir.path())
    };
    let data = spec.load_data().unwrap();
    let bank = tiny_bank(spec.descriptor, &spec.shots, &spec.losses);
    let out = run_colorization(&spec, &bank, &data.tests, &SweepOptions::new(dir.path().join("r.csv"))).unwrap();
    assert!(out.sweep.complete());
    let grid = image::open(&out.grid_path).unwrap().to_rgb8();
    let tile = 32 + 2;
    assert_eq!(grid.height() as usize, 4 * tile);
    assert_eq!(grid.width() as usize, 2 * tile);

    for (col, t) in data.tests.iter().enumerate() {
        let gray = tensor_to_rgb(&grayscale(&t.tensor).unwrap()).unwrap();
        let y = luma_operator(32, 32).apply(&t.tensor, ExecMode::Sequential).unwrap();
        for py in 0..32u32 {
            for px in 0..32u32 {
                let g = grid.get_pixel(col as u32 * tile as u32 + px, tile as u32 + py);
                assert_eq!(g, gray.get_pixel(px, py));
                assert!(g[0] == g[1] && g[1] == g[2]);
                let expect = ((y.data()[(py * 32 + px) as usize] as f64 + 1.0) * 127.5).round();
                assert!((g[0] as f64 - expect).abs() <= 1.0);
            }
        }
    }

    let mut rd = csv::Reader::from_path(&out.labels_path).unwrap();
    let mut checked = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        if rec[4].is_empty() {
            continue;
        }
        let id = &rec[3];
        let label = &rec[2];
        let record = out
            .sweep
            .records
            .iter()
            .find(|r| r.row.image_id == id && (label == "untrained") == (r.row.method == Method::Untrained))
            .unwrap();
        let truth = &data.tests.iter().find(|t: &&LabeledImage| t.id == id).unwrap().tensor;
        let p: f64 = rec[4].parse().unwrap();
        assert_eq!(p, psnr(&record.reconstruction, truth).unwrap());
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn manifest_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        root_seed: u64::MAX - 3,
        ..tiny_spec(Task::Cs, dir.path())
    };
    let data = spec.load_data().unwrap();
    let bank = tiny_bank(spec.descriptor, &spec.shots, &spec.losses);
    let m = RunManifest::new(&spec, &bank, Some(&data.manifest), &data.tests);
    let path = dir.path().join("manifest.toml");
    m.save(&path).unwrap();
    assert_eq!(RunManifest::load(&path).unwrap(), m);
    assert_eq!(m.cells.len(), 4);
}
