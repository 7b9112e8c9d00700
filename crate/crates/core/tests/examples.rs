// Every example must run to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));

            #[test]
            fn runs() {
                main().unwrap();
            }
        }
    };
}

example!(forward_pass);
example!(compress_subset);
example!(evolutionary_search);
example!(baselines);
example!(dynamic_skip);
example!(profile_mixtral);
example!(expert_stats);
example!(fine_tune_active);
