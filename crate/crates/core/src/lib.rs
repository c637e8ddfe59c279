/// `Display`/`FromStr` for field-less enums spelled as fixed keywords.
macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }
        impl std::str::FromStr for $ty {
            type Err = crate::Error;
            fn from_str(s: &str) -> crate::Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(crate::Error::Config(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod semantic;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
