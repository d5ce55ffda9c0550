use cmrm::cmrm::CmrmConfig;
use cmrm::config::ExperimentConfig;
use cmrm::data::{read_csv, SplitTag};
use cmrm::trainer::{train, Regularizer, TrainConfig};
use cmrm::{Error, Matrix};

fn blobs(classes: usize, sep: f64, arch: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
seed = 9
[data.synth]
num_classes = {classes}
dim = 4
per_class_count = 200
class_separation = {sep}
[model]
architecture = "{arch}"
[train]
epochs = 10
batch_size = 64
[output]
margins = false
"#
    ))
    .unwrap()
}

#[test]
fn linear_model_separates_distant_blobs() {
    let run = cmrm::cli::run_experiment(&blobs(3, 4.0, "linear")).unwrap();
    assert!(run.test.accuracy >= 0.95, "{}", run.test.accuracy);
}

#[test]
fn overlapping_binary_blobs_sit_at_chance() {
    let run = cmrm::cli::run_experiment(&blobs(2, 0.0, "two_layer_mlp")).unwrap();
    assert!(
        (run.test.accuracy - 0.5).abs() < 0.12,
        "{}",
        run.test.accuracy
    );
    let auroc = run.test.auroc.unwrap();
    assert!((auroc - 0.5).abs() < 0.12, "{auroc}");
}

#[test]
fn cmrm_term_is_negative_mean_margin_when_nothing_is_filtered() {
    // alpha near zero puts tau at the batch minimum, and a tiny temperature
    // makes every other weight one, so the regularizer reduces to
    // -mean(margin) with the minimum itself weighted by sigmoid(0) = 1/2.
    // One full batch logs the loss before any parameter update.
    let cfg = blobs(3, 3.0, "linear");
    let ds = cfg.build_dataset().unwrap();
    let params = cfg.init_model(&ds).unwrap();
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: ds.indices(SplitTag::Train).len(),
        regularizer: Regularizer::MultiClass(CmrmConfig {
            alpha: 1e-6,
            lambda: 1.0,
            temp: 1e-9,
            grad_through_threshold: false,
        }),
        ..Default::default()
    };
    let (_, records) = train(params.clone(), &ds, &train_cfg).unwrap();
    let rows = ds.indices(SplitTag::Train);
    let probs = cmrm::trainer::predict_proba(&params, &ds.features.select_rows(&rows)).unwrap();
    let margins: Vec<f64> = rows
        .iter()
        .zip(&probs)
        .map(|(&i, p)| cmrm::cmrm::margin(p, ds.observed_labels[i]).unwrap())
        .collect();
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let expected = -(margins.iter().sum::<f64>() - 0.5 * min) / margins.len() as f64;
    let cr = records[0].cr_loss.unwrap();
    assert!((cr - expected).abs() < 1e-9, "{cr} vs {expected}");
}

#[test]
fn csv_parse_errors_name_row_and_column() {
    let text = "age,income,label\n31,2.5,0\nforty,3.0,1\n";
    match read_csv(text.as_bytes(), "label", None) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 3);
            assert_eq!(column, "age");
        }
        other => panic!("unexpected {other:?}"),
    }
    let ds = read_csv("a,label\n1,0\n2,1\n".as_bytes(), "label", None).unwrap();
    assert_eq!(ds.features, Matrix::new(2, 1, vec![1.0, 2.0]).unwrap());
}
