//! User onboarding, auth keys and access certificates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerClass {
    Cpu,
    Gpu,
}

impl WorkerClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkerClass::Cpu => "cpu",
            WorkerClass::Gpu => "gpu",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCertificate {
    #[serde(default)]
    pub allowed_services: BTreeSet<String>,
    #[serde(default)]
    pub allowed_worker_classes: BTreeSet<WorkerClass>,
}

impl AccessCertificate {
    pub fn new<S, I, W>(services: I, workers: W) -> Self
    where
        S: Into<String>,
        I: IntoIterator<Item = S>,
        W: IntoIterator<Item = WorkerClass>,
    {
        AccessCertificate {
            allowed_services: services.into_iter().map(Into::into).collect(),
            allowed_worker_classes: workers.into_iter().collect(),
        }
    }

    pub fn allows_service(&self, name: &str) -> bool {
        self.allowed_services.contains(name)
    }

    pub fn allows_worker(&self, class: WorkerClass) -> bool {
        self.allowed_worker_classes.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub auth_key: String,
    pub certificate: AccessCertificate,
    pub created_at: Timestamp,
    pub revoked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UserError {
    #[error("user {0} already registered")]
    Conflict(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("authentication failed")]
    Authentication,
}

/// Bytes of entropy in a generated auth key.
pub const AUTH_KEY_BYTES: usize = 32;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UserRegistry {
    users: BTreeMap<String, UserRecord>,
    #[serde(skip)]
    by_key: BTreeMap<String, String>,
}

impl UserRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a registry from persisted records.
    pub fn from_records(records: impl IntoIterator<Item = UserRecord>) -> Self {
        let mut reg = UserRegistry::new();
        for r in records {
            if !r.revoked {
                reg.by_key.insert(r.auth_key.clone(), r.user_id.clone());
            }
            reg.users.insert(r.user_id.clone(), r);
        }
        reg
    }

    pub fn records(&self) -> impl Iterator<Item = &UserRecord> {
        self.users.values()
    }

    /// Registers a user with a fresh random key. A revoked user id may be
    /// registered again, which replaces its certificate and key.
    pub fn register_user<R: RngCore + ?Sized>(
        &mut self,
        user_id: &str,
        certificate: AccessCertificate,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<UserRecord, UserError> {
        if let Some(existing) = self.users.get(user_id) {
            if !existing.revoked {
                return Err(UserError::Conflict(user_id.into()));
            }
        }
        let auth_key = loop {
            let key = fresh_key(rng);
            if !self.by_key.contains_key(&key) {
                break key;
            }
        };
        let record = UserRecord {
            user_id: user_id.into(),
            auth_key: auth_key.clone(),
            certificate,
            created_at: now,
            revoked: false,
        };
        self.by_key.insert(auth_key, user_id.into());
        self.users.insert(user_id.into(), record.clone());
        Ok(record)
    }

    pub fn authenticate(&self, auth_key: &str) -> Result<&UserRecord, UserError> {
        self.by_key
            .get(auth_key)
            .and_then(|id| self.users.get(id))
            .filter(|u| !u.revoked)
            .ok_or(UserError::Authentication)
    }

    pub fn check_access(&self, auth_key: &str, service_name: &str) -> Result<Access, UserError> {
        let user = self.authenticate(auth_key)?;
        Ok(if user.certificate.allows_service(service_name) {
            Access::Allow
        } else {
            Access::Deny
        })
    }

    /// Idempotent: revoking an already revoked user succeeds.
    pub fn revoke(&mut self, user_id: &str) -> Result<(), UserError> {
        let user = self
            .users
            .get_mut(user_id)
            .ok_or_else(|| UserError::UnknownUser(user_id.into()))?;
        if !user.revoked {
            user.revoked = true;
            self.by_key.remove(&user.auth_key);
        }
        Ok(())
    }

    pub fn get(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn user_ids(&self) -> Vec<&str> {
        self.users.keys().map(String::as_str).collect()
    }
}

fn fresh_key<R: RngCore + ?Sized>(rng: &mut R) -> String {
    let mut bytes = [0u8; AUTH_KEY_BYTES];
    rng.fill_bytes(&mut bytes);
    let mut s = String::with_capacity(AUTH_KEY_BYTES * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
