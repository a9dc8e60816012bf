//! The grade predictors. Each one composes the dataset builders with a
//! solver and exposes a train/predict pair over [`TargetQuery`] values, which
//! never carry the grade being predicted.
//!
//! [`TargetQuery`]: crate::dataset::TargetQuery

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::types::{MAX_GRADE, MIN_GRADE};

mod factorization;
mod neighborhood;
mod regression;

pub use factorization::{
    CsmfStarOutcome, VALIDATION_FRACTION, bias_only_train, csmf_star_select, csmf_train_predict, mf_train_predict,
};
pub use neighborhood::{SbcfPrediction, sbcf_predict};
pub use regression::{CsrParams, SsrParams, csr_fit, csr_predict, csr_train, ssr_train_predict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Course-specific non-negative sparse regression.
    Csr,
    /// Course-specific regression on GPA-centered grades.
    CsrRc,
    /// Student-specific regression.
    Ssr,
    BiasOnly,
    /// Student-based collaborative filtering.
    Sbcf,
    Mf,
    /// Matrix factorization without the global bias.
    MfGb,
    /// Course-specific matrix factorization.
    Csmf,
    /// Course-specific matrix factorization, latent dimension chosen per course.
    CsmfStar,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Csr,
        Method::CsrRc,
        Method::Ssr,
        Method::BiasOnly,
        Method::Sbcf,
        Method::Mf,
        Method::MfGb,
        Method::Csmf,
        Method::CsmfStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Csr => "csr",
            Method::CsrRc => "csr-rc",
            Method::Ssr => "ssr",
            Method::BiasOnly => "biasonly",
            Method::Sbcf => "sbcf",
            Method::Mf => "mf",
            Method::MfGb => "mf-gb",
            Method::Csmf => "csmf",
            Method::CsmfStar => "csmf-star",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// A predicted grade.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub student: String,
    pub course: String,
    pub value: f64,
    pub method: Method,
    /// Whether the value was clamped to the grade range.
    pub clamped: bool,
}

impl Prediction {
    pub fn new(student: &str, course: &str, value: f64, method: Method) -> Self {
        Prediction {
            student: student.to_string(),
            course: course.to_string(),
            value,
            method,
            clamped: false,
        }
    }

    pub fn clamp(mut self) -> Self {
        self.value = self.value.clamp(MIN_GRADE, MAX_GRADE);
        self.clamped = true;
        self
    }
}

/// Why no model was estimated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Skip {
    /// Fewer training students than the floor.
    TooFewStudents { rows: usize, floor: usize },
    /// Nobody to predict for.
    NoTargets,
}

impl fmt::Display for Skip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Skip::TooFewStudents { rows, floor } => {
                write!(f, "{rows} training students, need {floor}")
            }
            Skip::NoTargets => f.write_str("no target students"),
        }
    }
}

/// Outcome of a train step that may decline to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Trained<T> {
    Fitted(T),
    Skipped(Skip),
}

impl<T> Trained<T> {
    pub fn fitted(self) -> Option<T> {
        match self {
            Trained::Fitted(t) => Some(t),
            Trained::Skipped(_) => None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self, Trained::Skipped(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("CSR-RC".parse::<Method>().unwrap(), Method::CsrRc);
        assert!("knn".parse::<Method>().is_err());
    }

    #[test]
    fn clamping_bounds_value() {
        let p = Prediction::new("s", "c", 4.7, Method::Csr).clamp();
        assert_eq!(p.value, 4.0);
        assert!(p.clamped);
        assert_eq!(Prediction::new("s", "c", -1.0, Method::Csr).clamp().value, 0.0);
    }
}
