use std::path::PathBuf;

use clap::Parser;
use ltt_corpusgen::generate_corpus;

/// Regenerate the bundled MiniLang corpus deterministically.
#[derive(Parser)]
struct Args {
    /// Output directory for the .ml0 files.
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    /// Number of programs.
    #[arg(long, default_value_t = 360)]
    programs: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 20240501)]
    seed: u64,
}

fn main() {
    let args = Args::parse();
    std::fs::create_dir_all(&args.out).expect("create output directory");
    let programs = generate_corpus(args.seed, args.programs);
    let mut total_tokens = 0usize;
    for (i, src) in programs.iter().enumerate() {
        let tree = ltt_core::minilang::parse(src)
            .unwrap_or_else(|e| panic!("generated program {i} does not parse: {e}"));
        let reparsed = ltt_core::minilang::parse(&ltt_core::minilang::unparse(&tree)).unwrap();
        assert_eq!(tree, reparsed, "round trip failure in program {i}");
        total_tokens += tree.token_count();
        let path = args.out.join(format!("p{i:04}.ml0"));
        std::fs::write(&path, src).expect("write program");
    }
    println!(
        "wrote {} programs ({} tokens) to {}",
        programs.len(),
        total_tokens,
        args.out.display()
    );
}
