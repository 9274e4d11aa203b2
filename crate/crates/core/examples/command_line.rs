//! Drives the command-line entry point in-process: generate data, train a
//! tiny model, evaluate it and emit a report.

use transcc::cli::main_with_args;

fn main() {
    let root = std::env::temp_dir().join("transcc_command_line");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("tiny.toml");
    std::fs::write(
        &config,
        "image_size = 32\ncount = 20\n\n[model]\nbase_channels = 8\nstage_channels = [8, 8, 16, 16]\n\
         attention_heads = 2\nprojection_dim = 16\nnorm_groups = 4\n\n[train]\nepochs = 3\ndecay_start_epoch = 1\n\
         anchors = 4\nnegatives = 4\n",
    )
    .unwrap();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--config".into(), cfg.clone(), "--out".into(), p("data")],
        vec!["train".into(), "--config".into(), cfg, "--data".into(), p("data"), "--out".into(), p("run")],
        vec!["eval".into(), "--checkpoint".into(), p("run/best.tcck"), "--data".into(), p("data"), "--split".into(), "val".into()],
        vec!["eval".into(), "--identity".into(), "--data".into(), p("data"), "--split".into(), "val".into(), "--out".into(), p("identity.csv")],
        vec![
            "report".into(),
            "--metrics".into(),
            p("run/metrics.jsonl"),
            "--table".into(),
            p("run/eval_val.csv"),
            "--table".into(),
            format!("identity={}", p("identity.csv")),
            "--out".into(),
            p("report"),
        ],
    ];
    for args in steps {
        println!("$ transcc {}", args.join(" "));
        let code = main_with_args(std::iter::once("transcc".to_string()).chain(args));
        if code != 0 {
            std::process::exit(code);
        }
    }
}
