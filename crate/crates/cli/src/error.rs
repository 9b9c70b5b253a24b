use std::fmt;

use thermoray_core::exprfield::EvalError;
use thermoray_core::flow::FlowError;
use thermoray_core::inverse::InverseError;
use thermoray_core::jacobi::JacobiError;
use thermoray_core::phase::PhaseError;
use thermoray_core::surface::SurfaceError;
use thermoray_core::xray::XrayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Hypothesis,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Hypothesis => 3,
            ErrorKind::Numerical => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ErrorKind::Config => "configuration error",
            ErrorKind::Hypothesis => "hypothesis violated",
            ErrorKind::Numerical => "numerical failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn hypothesis(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Hypothesis, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Numerical, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.label(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("i/o: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::numerical(e.to_string())
    }
}

fn surface_kind(e: &SurfaceError) -> ErrorKind {
    match e {
        SurfaceError::Eval(_) | SurfaceError::PoissonResidual { .. } => ErrorKind::Numerical,
        SurfaceError::NotClosed | SurfaceError::NotDisk => ErrorKind::Hypothesis,
        SurfaceError::NotPeriodic { .. } | SurfaceError::Invalid(_) => ErrorKind::Config,
    }
}

fn flow_kind(e: &FlowError) -> ErrorKind {
    match e {
        FlowError::Eval(_) | FlowError::StepFailure { .. } => ErrorKind::Numerical,
        FlowError::NotDisk | FlowError::LeftDomain { .. } | FlowError::NoExit { .. } => ErrorKind::Hypothesis,
        FlowError::OutsideDomain { .. } | FlowError::Invalid(_) => ErrorKind::Config,
    }
}

fn phase_kind(e: &PhaseError) -> ErrorKind {
    match e {
        PhaseError::StencilOutOfDomain { .. } | PhaseError::Hypothesis(_) => ErrorKind::Hypothesis,
        PhaseError::ShapeMismatch(_) | PhaseError::Eval(_) => ErrorKind::Numerical,
        PhaseError::Surface(s) => surface_kind(s),
    }
}

fn jacobi_kind(e: &JacobiError) -> ErrorKind {
    match e {
        JacobiError::Flow(f) => flow_kind(f),
        JacobiError::Surface(s) => surface_kind(s),
        JacobiError::Phase(p) => phase_kind(p),
        JacobiError::Eval(_) | JacobiError::OutOfRange { .. } => ErrorKind::Numerical,
        JacobiError::ConjugatePoint { .. } | JacobiError::Hypothesis(_) => ErrorKind::Hypothesis,
        JacobiError::Invalid(_) => ErrorKind::Config,
    }
}

fn xray_kind(e: &XrayError) -> ErrorKind {
    match e {
        XrayError::Flow(f) => flow_kind(f),
        XrayError::Phase(p) => phase_kind(p),
        XrayError::Eval(_) | XrayError::IllConditioned { .. } => ErrorKind::Numerical,
        XrayError::NoExit { .. } | XrayError::Support(_) => ErrorKind::Hypothesis,
        XrayError::Invalid(_) => ErrorKind::Config,
    }
}

fn inverse_kind(e: &InverseError) -> ErrorKind {
    match e {
        InverseError::Phase(p) => phase_kind(p),
        InverseError::Xray(x) => xray_kind(x),
        InverseError::Eval(_) => ErrorKind::Numerical,
        InverseError::Hypothesis(_) => ErrorKind::Hypothesis,
        InverseError::Invalid(_) => ErrorKind::Config,
    }
}

macro_rules! classify {
    ($($t:ty => $f:ident),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError { kind: $f(&e), message: e.to_string() }
            }
        }
    )*};
}

classify!(
    SurfaceError => surface_kind,
    FlowError => flow_kind,
    PhaseError => phase_kind,
    JacobiError => jacobi_kind,
    XrayError => xray_kind,
    InverseError => inverse_kind,
);
