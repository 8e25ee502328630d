//! Tool descriptors, handlers, and argument validation.
//!
//! Validation is strict: unknown keys are rejected, every violation is
//! reported in one pass, and declared defaults are filled in. A JSON `null`
//! argument is treated as absent.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use regex::Regex;
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    StringArray,
    ObjectArray,
    Object,
}

impl ParamType {
    pub fn describe(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::StringArray => "array of strings",
            ParamType::ObjectArray => "array of objects",
            ParamType::Object => "object",
        }
    }

    fn schema(self) -> Map<String, Value> {
        let v = match self {
            ParamType::String => json!({"type": "string"}),
            ParamType::Number => json!({"type": "number"}),
            ParamType::Integer => json!({"type": "integer"}),
            ParamType::Boolean => json!({"type": "boolean"}),
            ParamType::StringArray => json!({"type": "array", "items": {"type": "string"}}),
            ParamType::ObjectArray => json!({"type": "array", "items": {"type": "object"}}),
            ParamType::Object => json!({"type": "object"}),
        };
        match v {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub ty: ParamType,
    pub description: String,
    pub default: Option<Value>,
    /// Applies to strings, and to each item of a string array.
    pub pattern: Option<Regex>,
    /// Applies to strings, and to each item of a string array.
    pub allowed: Option<Vec<String>>,
    pub min_items: Option<usize>,
    pub unique_items: bool,
}

impl ParamSpec {
    pub fn new(ty: ParamType, description: impl Into<String>) -> Self {
        Self {
            ty,
            description: description.into(),
            default: None,
            pattern: None,
            allowed: None,
            min_items: None,
            unique_items: false,
        }
    }

    pub fn string(description: impl Into<String>) -> Self {
        Self::new(ParamType::String, description)
    }

    pub fn string_array(description: impl Into<String>) -> Self {
        Self::new(ParamType::StringArray, description)
    }

    pub fn with_default(mut self, value: Value) -> Self {
        self.default = Some(value);
        self
    }

    pub fn with_pattern(mut self, pattern: Regex) -> Self {
        self.pattern = Some(pattern);
        self
    }

    pub fn one_of<I, S>(mut self, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.allowed = Some(values.into_iter().map(Into::into).collect());
        self
    }

    pub fn non_empty_unique(mut self) -> Self {
        self.min_items = Some(1);
        self.unique_items = true;
        self
    }

    fn schema(&self) -> Value {
        let mut m = self.ty.schema();
        m.insert("description".into(), Value::from(self.description.as_str()));
        let item_level = self.ty == ParamType::StringArray;
        let mut constraints = Map::new();
        if let Some(p) = &self.pattern {
            constraints.insert("pattern".into(), Value::from(p.as_str()));
        }
        if let Some(a) = &self.allowed {
            constraints.insert("enum".into(), Value::from(a.clone()));
        }
        if item_level {
            if let Some(Value::Object(items)) = m.get_mut("items") {
                items.extend(constraints);
            }
        } else {
            m.extend(constraints);
        }
        if let Some(n) = self.min_items {
            m.insert("minItems".into(), Value::from(n));
        }
        if self.unique_items {
            m.insert("uniqueItems".into(), Value::from(true));
        }
        if let Some(d) = &self.default {
            m.insert("default".into(), d.clone());
        }
        Value::Object(m)
    }
}

/// An object schema: typed properties, a required list, and optional
/// "exactly one of" groups.
#[derive(Debug, Clone, Default)]
pub struct ParamSchema {
    pub properties: IndexMap<String, ParamSpec>,
    pub required: Vec<String>,
    pub exactly_one_of: Vec<Vec<String>>,
}

impl ParamSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn required(mut self, name: &str, spec: ParamSpec) -> Self {
        self.properties.insert(name.to_owned(), spec);
        self.required.push(name.to_owned());
        self
    }

    pub fn optional(mut self, name: &str, spec: ParamSpec) -> Self {
        self.properties.insert(name.to_owned(), spec);
        self
    }

    pub fn exactly_one(mut self, names: &[&str]) -> Self {
        self.exactly_one_of.push(names.iter().map(|s| (*s).to_owned()).collect());
        self
    }

    pub fn to_json(&self) -> Value {
        let properties: Map<String, Value> = self.properties.iter().map(|(k, v)| (k.clone(), v.schema())).collect();
        let mut m = Map::new();
        m.insert("type".into(), Value::from("object"));
        m.insert("properties".into(), Value::Object(properties));
        m.insert("required".into(), Value::from(self.required.clone()));
        m.insert("additionalProperties".into(), Value::from(false));
        if !self.exactly_one_of.is_empty() {
            let groups: Vec<Value> = self
                .exactly_one_of
                .iter()
                .flat_map(|g| g.iter().map(|name| json!({"required": [name]})))
                .collect();
            m.insert("oneOf".into(), Value::Array(groups));
        }
        Value::Object(m)
    }

    fn check(&self) -> Result<(), String> {
        for (name, spec) in &self.properties {
            if name.is_empty() {
                return Err("property with empty name".into());
            }
            if spec.description.trim().is_empty() {
                return Err(format!("property {name:?} has no description"));
            }
            if let Some(default) = &spec.default {
                if let Err(v) = check_value(name, spec, default) {
                    return Err(format!("default for {name:?} is invalid: {}", v[0].message));
                }
            }
        }
        for name in self.required.iter().chain(self.exactly_one_of.iter().flatten()) {
            if !self.properties.contains_key(name) {
                return Err(format!("{name:?} is referenced but not declared"));
            }
        }
        Ok(())
    }

    /// Checks `arguments` against this schema and returns the normalized value set.
    pub fn validate(&self, arguments: &Value) -> Result<IndexMap<String, Value>, Vec<Violation>> {
        let empty = Map::new();
        let args = match arguments {
            Value::Object(m) => m,
            Value::Null => &empty,
            other => {
                return Err(vec![Violation::new("", format!("arguments must be an object, got {}", json_type(other)))]);
            }
        };

        let mut violations = Vec::new();
        for key in args.keys() {
            if !self.properties.contains_key(key) {
                let known: Vec<&str> = self.properties.keys().map(String::as_str).collect();
                violations.push(Violation::new(
                    key,
                    format!("unknown parameter; expected one of: {}", known.join(", ")),
                ));
            }
        }

        let mut values = IndexMap::new();
        for (name, spec) in &self.properties {
            match args.get(name).filter(|v| !v.is_null()) {
                Some(v) => match check_value(name, spec, v) {
                    Ok(()) => {
                        values.insert(name.clone(), v.clone());
                    }
                    Err(mut vs) => violations.append(&mut vs),
                },
                None => {
                    if self.required.contains(name) {
                        violations.push(Violation::new(
                            name,
                            format!("missing required parameter ({})", spec.ty.describe()),
                        ));
                    } else if let Some(d) = &spec.default {
                        values.insert(name.clone(), d.clone());
                    }
                }
            }
        }

        for group in &self.exactly_one_of {
            let present = group
                .iter()
                .filter(|n| args.get(n.as_str()).is_some_and(|v| !v.is_null()))
                .count();
            if present != 1 {
                violations.push(Violation::new(
                    group.join("|"),
                    format!("exactly one of {} must be provided", group.join(", ")),
                ));
            }
        }

        if violations.is_empty() {
            Ok(values)
        } else {
            Err(violations)
        }
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_string(path: &str, spec: &ParamSpec, s: &str, out: &mut Vec<Violation>) {
    if let Some(p) = &spec.pattern {
        if !p.is_match(s) {
            out.push(Violation::new(path, format!("{s:?} does not match pattern {}", p.as_str())));
        }
    }
    if let Some(allowed) = &spec.allowed {
        if !allowed.iter().any(|a| a == s) {
            out.push(Violation::new(path, format!("{s:?} is not one of: {}", allowed.join(", "))));
        }
    }
}

fn check_value(name: &str, spec: &ParamSpec, v: &Value) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mismatch = |out: &mut Vec<Violation>| {
        out.push(Violation::new(
            name,
            format!("expected {}, got {}", spec.ty.describe(), json_type(v)),
        ));
    };
    match spec.ty {
        ParamType::String => match v.as_str() {
            Some(s) => check_string(name, spec, s, &mut out),
            None => mismatch(&mut out),
        },
        ParamType::Number => {
            if !v.is_number() {
                mismatch(&mut out);
            }
        }
        ParamType::Integer => {
            if !(v.is_i64() || v.is_u64()) {
                mismatch(&mut out);
            }
        }
        ParamType::Boolean => {
            if !v.is_boolean() {
                mismatch(&mut out);
            }
        }
        ParamType::Object => {
            if !v.is_object() {
                mismatch(&mut out);
            }
        }
        ParamType::StringArray | ParamType::ObjectArray => match v.as_array() {
            None => mismatch(&mut out),
            Some(items) => {
                if let Some(min) = spec.min_items {
                    if items.len() < min {
                        out.push(Violation::new(name, format!("must contain at least {min} item(s)")));
                    }
                }
                let mut seen = HashSet::new();
                for (i, item) in items.iter().enumerate() {
                    let path = format!("{name}[{i}]");
                    if spec.ty == ParamType::StringArray {
                        match item.as_str() {
                            Some(s) => {
                                check_string(&path, spec, s, &mut out);
                                if spec.unique_items && !seen.insert(s) {
                                    out.push(Violation::new(&path, format!("duplicate item {s:?}")));
                                }
                            }
                            None => out.push(Violation::new(&path, format!("expected string, got {}", json_type(item)))),
                        }
                    } else if !item.is_object() {
                        out.push(Violation::new(&path, format!("expected object, got {}", json_type(item))));
                    }
                }
            }
        },
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub param: String,
    pub message: String,
}

impl Violation {
    pub fn new(param: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            param: param.into(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"param": self.param, "message": self.message})
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.param.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.param, self.message)
        }
    }
}

pub fn violations_json(violations: &[Violation]) -> Value {
    Value::Array(violations.iter().map(Violation::to_json).collect())
}

#[derive(Debug, Clone)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub input_schema: ParamSchema,
    pub output_description: String,
}

impl ToolDescriptor {
    /// `{name, description, inputSchema}`. The output description is appended
    /// to the description so clients that only read `description` see it.
    pub fn manifest_entry(&self) -> Value {
        let description = if self.output_description.is_empty() {
            self.description.clone()
        } else {
            format!("{} Returns: {}", self.description, self.output_description)
        };
        json!({
            "name": self.name,
            "description": description,
            "inputSchema": self.input_schema.to_json(),
        })
    }

    fn check(&self) -> Result<(), String> {
        let valid_name = !self.name.is_empty()
            && self
                .name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if !valid_name {
            return Err(format!("tool name {:?} must match [a-z0-9_]+", self.name));
        }
        if self.description.trim().is_empty() {
            return Err(format!("tool {:?} has no description", self.name));
        }
        self.input_schema.check().map_err(|e| format!("tool {:?}: {e}", self.name))
    }
}

/// Arguments that passed validation, in schema order, defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedArgs {
    pub tool_name: String,
    pub values: IndexMap<String, Value>,
}

impl ValidatedArgs {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(Value::as_str)
    }

    pub fn strings(&self, name: &str) -> Vec<String> {
        self.get(name)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_owned).collect())
            .unwrap_or_default()
    }

    pub fn to_value(&self) -> Value {
        Value::Object(self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }
}

/// What a tool hands back to the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub content: Value,
    pub is_error: bool,
    pub human_summary: Option<String>,
}

impl ToolResult {
    pub fn success(content: Value, summary: impl Into<String>) -> Self {
        Self {
            content,
            is_error: false,
            human_summary: Some(summary.into()),
        }
    }

    pub fn failure(error_kind: &str, detail: impl Into<String>, extra: Option<Value>) -> Self {
        let detail = detail.into();
        let mut content = json!({"error_kind": error_kind, "detail": detail});
        if let (Some(Value::Object(extra)), Value::Object(c)) = (extra, &mut content) {
            c.extend(extra);
        }
        Self {
            content,
            is_error: true,
            human_summary: Some(format!("{error_kind}: {detail}")),
        }
    }
}

/// Reasons a call becomes a protocol error rather than a `ToolResult`.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("invalid arguments: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidParams(Vec<Violation>),
    #[error("provider {provider_id:?} is rate limited; retry after {retry_after_ms} ms")]
    RateLimited { provider_id: String, retry_after_ms: u64 },
    #[error("internal error: {0}")]
    Internal(String),
}

pub trait ToolHandler: Send + Sync {
    fn call(&self, args: &ValidatedArgs) -> Result<ToolResult, ToolError>;
}

impl<F> ToolHandler for F
where
    F: Fn(&ValidatedArgs) -> Result<ToolResult, ToolError> + Send + Sync,
{
    fn call(&self, args: &ValidatedArgs) -> Result<ToolResult, ToolError> {
        self(args)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("tool {0:?} is registered twice")]
    Duplicate(String),
    #[error("invalid tool descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("unknown tool {0:?}")]
    NotFound(String),
    #[error("invalid arguments for {tool}")]
    Invalid { tool: String, violations: Vec<Violation> },
}

struct RegisteredTool {
    descriptor: ToolDescriptor,
    handler: Arc<dyn ToolHandler>,
}

/// Immutable once the server starts.
#[derive(Default)]
pub struct Registry {
    tools: IndexMap<String, RegisteredTool>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, descriptor: ToolDescriptor, handler: Arc<dyn ToolHandler>) -> Result<(), RegistryError> {
        descriptor.check().map_err(RegistryError::InvalidDescriptor)?;
        if self.tools.contains_key(&descriptor.name) {
            return Err(RegistryError::Duplicate(descriptor.name));
        }
        self.tools
            .insert(descriptor.name.clone(), RegisteredTool { descriptor, handler });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn descriptor(&self, name: &str) -> Option<&ToolDescriptor> {
        self.tools.get(name).map(|t| &t.descriptor)
    }

    pub fn manifest(&self) -> Vec<Value> {
        self.tools.values().map(|t| t.descriptor.manifest_entry()).collect()
    }

    pub fn validate_params(&self, name: &str, arguments: &Value) -> Result<ValidatedArgs, ValidationError> {
        let tool = self.tools.get(name).ok_or_else(|| ValidationError::NotFound(name.to_owned()))?;
        tool.descriptor
            .input_schema
            .validate(arguments)
            .map(|values| ValidatedArgs {
                tool_name: name.to_owned(),
                values,
            })
            .map_err(|violations| ValidationError::Invalid {
                tool: name.to_owned(),
                violations,
            })
    }

    pub fn handler(&self, name: &str) -> Option<Arc<dyn ToolHandler>> {
        self.tools.get(name).map(|t| t.handler.clone())
    }
}
