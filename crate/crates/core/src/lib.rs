pub mod corpus;
pub mod green;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod orchestrator;
pub mod rng;
pub mod subword;
pub mod training;

#[cfg(doctest)]
mod booktest {
    macro_rules! booktest {
        ($($name:ident),*) => {
            $(
                #[doc = include_str!(concat!("../../../book/src/", stringify!($name), ".md"))]
                mod $name {}
            )*
        };
    }
    booktest!(introduction, corpus, subword, numerics, models, training, metrics, green, autobuild, gateway);
}
