use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene infeasible: could not place vehicle {vehicle} of scene {scene_id} after {attempts} attempts")]
    SceneInfeasible {
        scene_id: u64,
        vehicle: usize,
        attempts: usize,
    },

    #[error("link outage: no propagation path between base station and receiver")]
    LinkOutage,

    #[error("marker collision: base station and receiver map to voxel cell {0:?}")]
    MarkerCollision([usize; 3]),

    #[error("non-finite value produced by layer `{layer}`")]
    Numeric { layer: String },

    #[error("contact time too short: no K satisfies T_df(K) < {t_total_ms} ms")]
    ContactTimeTooShort { t_total_ms: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by a bad configuration rather than bad data.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
