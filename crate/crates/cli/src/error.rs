use std::fmt;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A failure with its process exit code. Rendered on stderr as one line:
/// `error: <kind>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            EXIT_NUMERIC => "numeric",
            _ => "data",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error: {}: {}", self.kind(), one_line)
    }
}

impl From<ivtrust::Error> for CliError {
    fn from(e: ivtrust::Error) -> Self {
        use ivtrust::Error as E;
        let code = match &e {
            _ if e.is_numeric() => EXIT_NUMERIC,
            E::InvalidArgument(_) | E::Shape { .. } | E::OutOfRange { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_error_kind() {
        let d: CliError = ivtrust::Error::Diverged { epoch: 1, step: 2, loss: f64::NAN }.into();
        assert_eq!(d.code, EXIT_NUMERIC);
        let p: CliError = ivtrust::Error::Parse { path: "a".into(), line: 3, msg: "x".into() }.into();
        assert_eq!(p.code, EXIT_DATA);
        assert_eq!(CliError::config("bad\nkey").to_string(), "error: config: bad key");
    }
}
