use std::fmt::Display;
use std::path::Path;

/// Exit code for usage, configuration, parse and alignment errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for numerical failures on well-formed input.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn read(path: &Path, e: impl Display) -> Self {
        Self::usage(format!("cannot read {}: {e}", path.display()))
    }

    pub fn write(path: &Path, e: impl Display) -> Self {
        Self::usage(format!("cannot write {}: {e}", path.display()))
    }

    /// Attaches the offending file to a library error.
    pub fn in_file(path: &Path) -> impl FnOnce(crowd_centroid::Error) -> Self + '_ {
        move |e| {
            let mut err = Self::from(e);
            err.message = format!("{}: {}", path.display(), err.message);
            err
        }
    }
}

impl From<crowd_centroid::Error> for CliError {
    fn from(e: crowd_centroid::Error) -> Self {
        Self {
            code: if e.is_input_error() { EXIT_USAGE } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowd_centroid::Error;

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Parse("x".into())).code, EXIT_USAGE);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_USAGE);
        assert_eq!(CliError::from(Error::LengthMismatch { left: 1, right: 2 }).code, EXIT_USAGE);
        assert_eq!(CliError::from(Error::NonFinite("x".into())).code, EXIT_DATA);
        assert_eq!(CliError::from(Error::DegenerateInput("x".into())).code, EXIT_DATA);
    }

    #[test]
    fn file_context_is_prepended() {
        let err = CliError::in_file(Path::new("a.csv"))(Error::EmptyInput("no rows".into()));
        assert!(err.message.starts_with("a.csv: "));
        assert_eq!(err.code, EXIT_USAGE);
    }
}
