//! Every example runs to completion.

#[allow(dead_code)]
#[path = "../examples/generate_data.rs"]
mod generate_data;

#[test]
fn generate_data_runs() {
    generate_data::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/train_shapes.rs"]
mod train_shapes;

#[test]
fn train_shapes_runs() {
    train_shapes::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/sample_modes.rs"]
mod sample_modes;

#[test]
fn sample_modes_runs() {
    sample_modes::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/evaluate.rs"]
mod evaluate;

#[test]
fn evaluate_runs() {
    evaluate::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/ablation.rs"]
mod ablation;

#[test]
fn ablation_runs() {
    ablation::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/gradient_check.rs"]
mod gradient_check;

#[test]
fn gradient_check_runs() {
    gradient_check::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/inspect_tokens.rs"]
mod inspect_tokens;

#[test]
fn inspect_tokens_runs() {
    inspect_tokens::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/text_tasks.rs"]
mod text_tasks;

#[test]
fn text_tasks_runs() {
    text_tasks::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/configs.rs"]
mod configs;

#[test]
fn configs_runs() {
    configs::run_example().unwrap();
}
