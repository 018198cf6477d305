//! Runs every example so they stay working.

mod batch_plan {
    include!("../examples/batch_plan.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod compare_conditioning {
    include!("../examples/compare_conditioning.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod decode_strategies {
    include!("../examples/decode_strategies.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod external_reward {
    include!("../examples/external_reward.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod generate_corpus {
    include!("../examples/generate_corpus.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod model_forward {
    include!("../examples/model_forward.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod score_reports {
    include!("../examples/score_reports.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod scst_generated_prompts {
    include!("../examples/scst_generated_prompts.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod teacher_forcing {
    include!("../examples/teacher_forcing.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}

mod tokenize_reports {
    include!("../examples/tokenize_reports.rs");

    #[test]
    fn run_example() {
        main().unwrap();
    }
}
