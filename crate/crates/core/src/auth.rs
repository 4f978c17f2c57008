//! Accounts, bearer tokens and the four-level role hierarchy.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::SessionId;

pub const TOKEN_TTL_MS: u64 = 24 * 60 * 60 * 1000;
pub const MAX_CONSECUTIVE_FAILURES: u32 = 10;
pub const LOCKOUT_MS: u64 = 60_000;
pub const MIN_PASSWORD_LEN: usize = 8;

/// Privilege levels; each includes everything below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Viewer,
    Operator,
    Developer,
    Admin,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Viewer, Role::Operator, Role::Developer, Role::Admin];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Viewer => "viewer",
            Role::Operator => "operator",
            Role::Developer => "developer",
            Role::Admin => "admin",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = AuthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| AuthError::Invalid(format!("unknown role {s:?}")))
    }
}

/// Everything a token can be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ReadDevices,
    ReadTelemetry,
    ReadFrames,
    ReadMissions,
    ReadRules,
    AcquireControl,
    ReleaseControl,
    SendCommand,
    SetGoal,
    SetActuator,
    AckMission,
    ReadSessionLog,
    RegisterDeviceConfig,
    UpdateAnomalyRule,
    ManageUsers,
    ForceRelease,
}

impl Action {
    pub const ALL: [Action; 16] = [
        Action::ReadDevices,
        Action::ReadTelemetry,
        Action::ReadFrames,
        Action::ReadMissions,
        Action::ReadRules,
        Action::AcquireControl,
        Action::ReleaseControl,
        Action::SendCommand,
        Action::SetGoal,
        Action::SetActuator,
        Action::AckMission,
        Action::ReadSessionLog,
        Action::RegisterDeviceConfig,
        Action::UpdateAnomalyRule,
        Action::ManageUsers,
        Action::ForceRelease,
    ];

    /// Lowest role allowed to perform this action.
    pub fn min_role(self) -> Role {
        use Action::*;
        match self {
            ReadDevices | ReadTelemetry | ReadFrames | ReadMissions | ReadRules => Role::Viewer,
            AcquireControl | ReleaseControl | SendCommand | SetGoal | SetActuator | AckMission
            | ReadSessionLog => Role::Operator,
            RegisterDeviceConfig | UpdateAnomalyRule => Role::Developer,
            ManageUsers | ForceRelease => Role::Admin,
        }
    }
}

pub fn role_allows(role: Role, action: Action) -> bool {
    role >= action.min_role()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("unauthenticated")]
    Unauthenticated,
    #[error("role {role} may not {action:?}")]
    Forbidden { role: Role, action: Action },
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("too many failed logins; retry in {retry_after_ms} ms")]
    LockedOut { retry_after_ms: u64 },
    #[error("user {0} already exists")]
    Conflict(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("{0}")]
    Invalid(String),
    #[error("user database failure: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    /// Argon2id PHC string; carries its own per-user salt.
    pub pass_hash: String,
    pub role: Role,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IssuedToken {
    pub token: String,
    pub username: String,
    pub role: Role,
    pub session_id: SessionId,
    pub expires_ms: u64,
}

/// A validated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub username: String,
    pub role: Role,
    pub session_id: SessionId,
}

#[derive(Debug, Clone)]
struct TokenInfo {
    username: String,
    session_id: SessionId,
    expires_ms: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct FailureState {
    consecutive: u32,
    locked_until_ms: u64,
}

/// Argon2id work factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashCost {
    pub memory_kib: u32,
    pub iterations: u32,
}

impl Default for HashCost {
    fn default() -> Self {
        Self { memory_kib: Params::DEFAULT_M_COST, iterations: Params::DEFAULT_T_COST }
    }
}

#[derive(Debug, Clone)]
pub struct AuthConfig {
    /// JSON user database; `None` keeps accounts in memory.
    pub users_file: Option<PathBuf>,
    pub token_ttl_ms: u64,
    pub hash_cost: HashCost,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self { users_file: None, token_ttl_ms: TOKEN_TTL_MS, hash_cost: HashCost::default() }
    }
}

pub struct Auth {
    users: RwLock<HashMap<String, UserRecord>>,
    tokens: RwLock<HashMap<String, TokenInfo>>,
    failures: Mutex<HashMap<String, FailureState>>,
    config: AuthConfig,
    hasher: Argon2<'static>,
}

impl Auth {
    pub fn open(config: AuthConfig) -> Result<Self, AuthError> {
        let params = Params::new(config.hash_cost.memory_kib, config.hash_cost.iterations, 1, None)
            .map_err(|e| AuthError::Invalid(format!("hash parameters: {e}")))?;
        let users = match &config.users_file {
            Some(path) if path.exists() => {
                let raw = std::fs::read(path).map_err(|e| AuthError::Storage(e.to_string()))?;
                let list: Vec<UserRecord> =
                    serde_json::from_slice(&raw).map_err(|e| AuthError::Storage(e.to_string()))?;
                list.into_iter().map(|u| (u.username.clone(), u)).collect()
            }
            _ => HashMap::new(),
        };
        Ok(Self {
            users: RwLock::new(users),
            tokens: RwLock::new(HashMap::new()),
            failures: Mutex::new(HashMap::new()),
            hasher: Argon2::new(Algorithm::Argon2id, Version::V0x13, params),
            config,
        })
    }

    pub fn in_memory() -> Self {
        Self::open(AuthConfig::default()).expect("default auth config is valid")
    }

    pub fn user_count(&self) -> usize {
        self.users.read().len()
    }

    pub fn user(&self, username: &str) -> Option<UserRecord> {
        self.users.read().get(username).cloned()
    }

    pub fn users(&self) -> Vec<UserRecord> {
        let mut all: Vec<_> = self.users.read().values().cloned().collect();
        all.sort_by(|a, b| a.username.cmp(&b.username));
        all
    }

    /// Adds an account without a caller check. For bootstrap and offline administration.
    pub fn insert_user(&self, username: &str, password: &str, role: Role, now_ms: u64) -> Result<UserRecord, AuthError> {
        validate_username(username)?;
        if password.chars().count() < MIN_PASSWORD_LEN {
            return Err(AuthError::Invalid(format!("password must be at least {MIN_PASSWORD_LEN} characters")));
        }
        let pass_hash = self.hash(password)?;
        let record = UserRecord { username: username.to_owned(), pass_hash, role, created_ms: now_ms };
        let mut users = self.users.write();
        if users.contains_key(username) {
            return Err(AuthError::Conflict(username.to_owned()));
        }
        users.insert(username.to_owned(), record.clone());
        self.persist(&users)?;
        Ok(record)
    }

    pub fn create_user(
        &self,
        admin_token: &str,
        username: &str,
        password: &str,
        role: Role,
        now_ms: u64,
    ) -> Result<UserRecord, AuthError> {
        self.check_permission(admin_token, Action::ManageUsers, now_ms)?;
        self.insert_user(username, password, role, now_ms)
    }

    /// Changes a role without a caller check.
    pub fn assign_role(&self, username: &str, role: Role) -> Result<UserRecord, AuthError> {
        let mut users = self.users.write();
        let user = users.get_mut(username).ok_or_else(|| AuthError::UnknownUser(username.to_owned()))?;
        user.role = role;
        let updated = user.clone();
        self.persist(&users)?;
        Ok(updated)
    }

    pub fn set_role(&self, admin_token: &str, username: &str, role: Role, now_ms: u64) -> Result<UserRecord, AuthError> {
        self.check_permission(admin_token, Action::ManageUsers, now_ms)?;
        self.assign_role(username, role)
    }

    /// Verifies credentials and issues a fresh token. Unknown users and wrong
    /// passwords produce the same error.
    pub fn authenticate(&self, username: &str, password: &str, now_ms: u64) -> Result<IssuedToken, AuthError> {
        {
            let mut failures = self.failures.lock();
            if let Some(state) = failures.get_mut(username) {
                if state.locked_until_ms > now_ms {
                    return Err(AuthError::LockedOut { retry_after_ms: state.locked_until_ms - now_ms });
                }
                if state.locked_until_ms != 0 {
                    *state = FailureState::default();
                }
            }
        }
        let user = self.user(username);
        let ok = match &user {
            Some(u) => self.verify(password, &u.pass_hash),
            None => {
                // keep unknown-user timing in line with a wrong password
                let _ = self.verify(password, dummy_hash(&self.hasher));
                false
            }
        };
        let Some(user) = user.filter(|_| ok) else {
            let mut failures = self.failures.lock();
            let state = failures.entry(username.to_owned()).or_default();
            state.consecutive += 1;
            if state.consecutive >= MAX_CONSECUTIVE_FAILURES {
                state.locked_until_ms = now_ms + LOCKOUT_MS;
            }
            return Err(AuthError::InvalidCredentials);
        };
        self.failures.lock().remove(username);

        let token = random_token();
        let session_id = SessionId::random();
        let expires_ms = now_ms.saturating_add(self.config.token_ttl_ms);
        self.tokens.write().insert(
            token.clone(),
            TokenInfo { username: user.username.clone(), session_id: session_id.clone(), expires_ms },
        );
        Ok(IssuedToken { token, username: user.username, role: user.role, session_id, expires_ms })
    }

    /// Resolves a token to its caller. Expired tokens are purged.
    pub fn validate(&self, token: &str, now_ms: u64) -> Result<Principal, AuthError> {
        let info = self.tokens.read().get(token).cloned().ok_or(AuthError::Unauthenticated)?;
        if now_ms >= info.expires_ms {
            self.tokens.write().remove(token);
            return Err(AuthError::Unauthenticated);
        }
        let role = self.user(&info.username).ok_or(AuthError::Unauthenticated)?.role;
        Ok(Principal { username: info.username, role, session_id: info.session_id })
    }

    pub fn check_permission(&self, token: &str, action: Action, now_ms: u64) -> Result<Principal, AuthError> {
        let principal = self.validate(token, now_ms)?;
        if role_allows(principal.role, action) {
            Ok(principal)
        } else {
            Err(AuthError::Forbidden { role: principal.role, action })
        }
    }

    pub fn logout(&self, token: &str, now_ms: u64) -> Result<Principal, AuthError> {
        let principal = self.validate(token, now_ms)?;
        self.tokens.write().remove(token);
        Ok(principal)
    }

    /// True while some unexpired token belongs to `session`.
    pub fn has_session(&self, session: &SessionId, now_ms: u64) -> bool {
        self.tokens.read().values().any(|t| &t.session_id == session && t.expires_ms > now_ms)
    }

    /// Drops expired tokens and returns the sessions they belonged to.
    pub fn purge_expired(&self, now_ms: u64) -> Vec<SessionId> {
        let mut tokens = self.tokens.write();
        let mut gone = Vec::new();
        tokens.retain(|_, t| {
            let live = t.expires_ms > now_ms;
            if !live {
                gone.push(t.session_id.clone());
            }
            live
        });
        gone
    }

    fn hash(&self, password: &str) -> Result<String, AuthError> {
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        let salt = SaltString::encode_b64(&salt).map_err(|e| AuthError::Storage(e.to_string()))?;
        self.hasher
            .hash_password(password.as_bytes(), &salt)
            .map(|h| h.to_string())
            .map_err(|e| AuthError::Storage(e.to_string()))
    }

    fn verify(&self, password: &str, phc: &str) -> bool {
        PasswordHash::new(phc)
            .map(|parsed| self.hasher.verify_password(password.as_bytes(), &parsed).is_ok())
            .unwrap_or(false)
    }

    fn persist(&self, users: &HashMap<String, UserRecord>) -> Result<(), AuthError> {
        let Some(path) = &self.config.users_file else {
            return Ok(());
        };
        let mut list: Vec<&UserRecord> = users.values().collect();
        list.sort_by(|a, b| a.username.cmp(&b.username));
        let body = serde_json::to_vec_pretty(&list).map_err(|e| AuthError::Storage(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| AuthError::Storage(e.to_string()))?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body).map_err(|e| AuthError::Storage(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| AuthError::Storage(e.to_string()))
    }
}

fn validate_username(username: &str) -> Result<(), AuthError> {
    let len = username.chars().count();
    if !(3..=32).contains(&len) {
        return Err(AuthError::Invalid("username must be 3-32 characters".into()));
    }
    if !username.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
        return Err(AuthError::Invalid("username may use letters, digits, '_', '-', '.'".into()));
    }
    Ok(())
}

fn random_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

fn dummy_hash(hasher: &Argon2<'static>) -> &'static str {
    static DUMMY: OnceLock<String> = OnceLock::new();
    DUMMY.get_or_init(|| {
        let salt = SaltString::encode_b64(&[0x5a; 16]).expect("static salt");
        hasher
            .hash_password(b"not-a-real-password", &salt)
            .map(|h| h.to_string())
            .unwrap_or_default()
    })
}
