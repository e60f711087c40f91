//! Typed access to a command's `key = value` settings.

use std::path::PathBuf;
use std::str::FromStr;

use patchtrack::config::{parse_bool, parse_num, KeyValues};
use patchtrack::flowlab::FlowConfig;
use patchtrack::imgproc::DetectConfig;
use patchtrack::infer::PeakConfig;
use patchtrack::{Error, Result};

/// Settings consumed key by key; whatever is left at [`Keys::finish`] is an
/// unknown key.
pub struct Keys {
    kv: KeyValues,
    command: &'static str,
}

impl Keys {
    pub fn new(kv: KeyValues, command: &'static str) -> Self {
        Self { kv, command }
    }

    pub fn str(&mut self, k: &str) -> Option<String> {
        self.kv.take(k)
    }

    pub fn required(&mut self, k: &str) -> Result<String> {
        self.str(k)
            .ok_or_else(|| Error::Config(format!("{} needs `{k}`", self.command)))
    }

    pub fn path(&mut self, k: &str) -> Option<PathBuf> {
        self.str(k).map(PathBuf::from)
    }

    pub fn num<T: FromStr>(&mut self, k: &str, default: T) -> Result<T> {
        Ok(self.opt(k)?.unwrap_or(default))
    }

    pub fn opt<T: FromStr>(&mut self, k: &str) -> Result<Option<T>> {
        self.str(k).map(|v| parse_num(k, &v)).transpose()
    }

    pub fn flag(&mut self, k: &str, default: bool) -> Result<bool> {
        Ok(self.str(k).map(|v| parse_bool(k, &v)).transpose()?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&mut self, k: &str) -> Result<Option<Vec<T>>> {
        self.str(k)
            .map(|v| v.split(',').map(|s| parse_num(k, s.trim())).collect())
            .transpose()
    }

    pub fn peak(&mut self) -> Result<PeakConfig> {
        let d = PeakConfig::default();
        Ok(PeakConfig {
            soft_window: self.num("soft_window", d.soft_window)?,
            soft_temperature: self.num("soft_temperature", d.soft_temperature)?,
            prob_temperature: self.num("prob_temperature", d.prob_temperature)?,
            confidence_floor: self.opt("confidence_floor")?,
        })
    }

    pub fn detect(&mut self, max_points: usize) -> Result<DetectConfig> {
        let d = DetectConfig::default();
        Ok(DetectConfig {
            threshold: self.num("fast_threshold", d.threshold)?,
            max_points: self.num("max_points", max_points)?,
            nms_radius: self.num("nms_radius", d.nms_radius)?,
        })
    }

    pub fn flow(&mut self) -> Result<FlowConfig> {
        let d = FlowConfig::default();
        Ok(FlowConfig {
            levels: self.num("lk_levels", d.levels)?,
            window: self.num("lk_window", d.window)?,
            max_iters: self.num("lk_iters", d.max_iters)?,
            fb_threshold: self.num("fb_threshold", d.fb_threshold)?,
            normalize: self.flag("lk_normalize", d.normalize)?,
            ..d
        })
    }

    pub fn finish(self) -> Result<()> {
        match self.kv.iter().next() {
            None => Ok(()),
            Some((k, _)) => Err(Error::Config(format!("unknown {} key `{k}`", self.command))),
        }
    }
}
