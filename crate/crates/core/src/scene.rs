//! On-disk scene directory:
//!
//! ```text
//! images/NNN.png | images/NNN.ppm
//! depth_mvs/NNN.pfm   (+ NNN.pgm validity mask)
//! depth_mono/NNN.pfm
//! depth_gt/NNN.pfm    (optional, used for evaluation only)
//! cameras.json        one record per view, indexed by position
//! split.json          {"train": [...], "test": [...]}
//! ```

use std::path::PathBuf;

use crate::fixtures::SceneFixture;
use crate::geometry::{DepthRole, GeometryError, View};
use crate::io::{read_depth, read_image, read_json, write_depth, write_image, CameraRecord, IoError, Split};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("view {view}: {source}")]
    Geometry {
        view: usize,
        #[source]
        source: GeometryError,
    },
    #[error("split references view {view} but cameras.json has {count}")]
    SplitOutOfRange { view: usize, count: usize },
}

/// Whether a depth kind must be present for a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Required,
    Optional,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthNeeds {
    pub mvs: Need,
    pub mono: Need,
    pub gt: Need,
}

impl DepthNeeds {
    pub const NONE: Self = Self {
        mvs: Need::Skip,
        mono: Need::Skip,
        gt: Need::Skip,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageFormat {
    #[default]
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneDir {
    pub root: PathBuf,
}

pub fn view_name(i: usize) -> String {
    format!("{i:03}")
}

impl SceneDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cameras_path(&self) -> PathBuf {
        self.root.join("cameras.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn depth_path(&self, kind: DepthRole, i: usize) -> PathBuf {
        let dir = match kind {
            DepthRole::Mvs => "depth_mvs",
            DepthRole::Mono => "depth_mono",
            _ => "depth_gt",
        };
        self.root.join(dir).join(format!("{}.pfm", view_name(i)))
    }

    /// The existing image file for view `i`, PNG preferred.
    pub fn image_path(&self, i: usize) -> Result<PathBuf, SceneError> {
        let base = self.root.join("images").join(view_name(i));
        for ext in ["png", "ppm"] {
            let p = base.with_extension(ext);
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(SceneError::MissingInput(base.with_extension("png")))
    }

    fn require(path: PathBuf) -> Result<PathBuf, SceneError> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(SceneError::MissingInput(path))
        }
    }

    pub fn cameras(&self) -> Result<Vec<CameraRecord>, SceneError> {
        Ok(read_json(&Self::require(self.cameras_path())?)?)
    }

    pub fn split(&self) -> Result<Split, SceneError> {
        let split: Split = read_json(&Self::require(self.split_path())?)?;
        let count = self.cameras()?.len();
        if let Some(&view) = split.train.iter().chain(&split.test).find(|&&v| v >= count) {
            return Err(SceneError::SplitOutOfRange { view, count });
        }
        Ok(split)
    }

    fn load_depth(&self, kind: DepthRole, i: usize, need: Need) -> Result<Option<crate::geometry::DepthMap>, SceneError> {
        if need == Need::Skip {
            return Ok(None);
        }
        let p = self.depth_path(kind, i);
        if !p.is_file() {
            return match need {
                Need::Required => Err(SceneError::MissingInput(p)),
                _ => Ok(None),
            };
        }
        Ok(Some(read_depth(&p, kind)?))
    }

    /// Loads views `ids` with the depths requested in `needs`.
    pub fn load_views(&self, ids: &[usize], needs: DepthNeeds) -> Result<Vec<View>, SceneError> {
        let cams = self.cameras()?;
        ids.iter()
            .map(|&i| {
                let rec = cams.get(i).ok_or(SceneError::SplitOutOfRange {
                    view: i,
                    count: cams.len(),
                })?;
                let geo = |source| SceneError::Geometry { view: i, source };
                let k = rec.intrinsics().map_err(geo)?;
                let pose = rec.pose().map_err(geo)?;
                let image = read_image(&self.image_path(i)?)?;
                let mut v = View::new(image, k, pose).map_err(geo)?;
                for (kind, need) in [
                    (DepthRole::Mvs, needs.mvs),
                    (DepthRole::Mono, needs.mono),
                    (DepthRole::GroundTruth, needs.gt),
                ] {
                    if let Some(d) = self.load_depth(kind, i, need)? {
                        v.attach(d).map_err(geo)?;
                    }
                }
                Ok(v)
            })
            .collect()
    }

    /// Writes every view of `fx` plus cameras and split.
    pub fn write_fixture(&self, fx: &SceneFixture, format: ImageFormat) -> Result<(), SceneError> {
        let mut cams = Vec::with_capacity(fx.views.len());
        for (i, v) in fx.views.iter().enumerate() {
            let img = self
                .root
                .join("images")
                .join(view_name(i))
                .with_extension(format.extension());
            write_image(&img, &v.image)?;
            for (kind, d) in [
                (DepthRole::Mvs, &v.mvs_depth),
                (DepthRole::Mono, &v.mono_depth),
                (DepthRole::GroundTruth, &v.gt_depth),
            ] {
                if let Some(d) = d {
                    write_depth(&self.depth_path(kind, i), d)?;
                }
            }
            cams.push(CameraRecord::from_camera(&v.intrinsics, &v.pose));
        }
        crate::io::write_json(&self.cameras_path(), &cams)?;
        crate::io::write_json(
            &self.split_path(),
            &Split {
                train: fx.train.clone(),
                test: fx.test.clone(),
            },
        )?;
        Ok(())
    }
}
