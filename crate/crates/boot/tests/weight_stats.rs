use mlb_boot::pipeline::{generate_data, StepEvent};
use mlb_boot::{run_experiment, ExperimentConfig, Result, RunOptions};

/// Pixels whose pseudo label fixes a wrong initialized label should get more
/// pseudo-label weight, on average, than pixels where the two labels agree.
#[test]
fn pseudo_labels_that_correct_the_initialized_label_weigh_more() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.unlabeled = 16;
    cfg.data.eval = 2;
    cfg.hyper.epochs_mlb = 2;
    let generated = generate_data(&cfg.data).unwrap();
    let truth = &generated.unlabeled_truth;

    // (sum of weights, pixel count) for corrected and agreeing pixels.
    let mut corrected = (0.0, 0usize);
    let mut agree = (0.0, 0usize);
    let mut hook = |ev: &StepEvent| -> Result<()> {
        for (j, &k) in ev.batch.iter().enumerate() {
            let init = ev.noisy.samples[k].mask.as_ref().unwrap().data();
            let pseudo = ev.report.labels_p[j].data();
            let weights = ev.report.weights[j].p.data();
            for (i, &w) in weights.iter().enumerate() {
                let t = truth[k].data()[i];
                if init[i] != t && pseudo[i] == t {
                    corrected.0 += w;
                    corrected.1 += 1;
                } else if init[i] == pseudo[i] {
                    agree.0 += w;
                    agree.1 += 1;
                }
            }
        }
        Ok(())
    };
    run_experiment(
        &cfg,
        &generated.splits,
        RunOptions {
            on_step: Some(&mut hook),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(corrected.1 > 100, "only {} corrected pixels", corrected.1);
    let mean_corrected = corrected.0 / corrected.1 as f64;
    let mean_agree = agree.0 / agree.1 as f64;
    assert!(
        mean_corrected > mean_agree,
        "corrected {mean_corrected:e} over {} px, agreeing {mean_agree:e} over {} px",
        corrected.1,
        agree.1
    );
}
