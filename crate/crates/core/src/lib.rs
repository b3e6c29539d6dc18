//! Model-aware counterfactual contrastive decoding.
//!
//! The pipeline runs detections through [`track`] into soft-masked object
//! tracks, composes masked counterfactual views in [`compose`], tunes mask
//! strengths against a [`backend`] in [`optimize`], and contrasts the two
//! views token by token in [`decode`]. [`eval`] wraps it all in a seeded
//! synthetic benchmark with the usual statistics.

/// `name`, `Display` and `FromStr` for enums with fixed command-line spellings.
macro_rules! cli_names {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!(
                        "unknown {} '{}', expected one of: {}",
                        stringify!($ty), other, [$($name),+].join(" | ")
                    )),
                }
            }
        }
    };
}

pub mod backend;
pub mod compose;
pub mod decode;
pub mod eval;
pub mod optimize;
pub mod track;
pub mod video;
