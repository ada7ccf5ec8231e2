pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    Io(std::io::Error),
    /// Malformed file content or configuration; the message names the
    /// offending file/record/key.
    Invalid(String),
    /// Training aborted because validation error exploded.
    Diverged { val_error_cm: f64, initial_cm: f64, state_dump: Option<std::path::PathBuf> },
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Invalid(msg) => write!(f, "{msg}"),
            Error::Diverged { val_error_cm, initial_cm, state_dump } => {
                write!(
                    f,
                    "training diverged: validation error {val_error_cm:.3} cm exploded past the initial {initial_cm:.3} cm"
                )?;
                match state_dump {
                    Some(p) => write!(f, " (state dumped to {})", p.display()),
                    None => Ok(()),
                }
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Shorthand for building an [`Error::Invalid`] with format arguments.
#[macro_export]
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
