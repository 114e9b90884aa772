import init, { machines, pathBetween, agentPlan, replaySchedule } from "./pkg/fogbed_demo.js";

const FACTORY = {
  "machines": [
    {
      "id": "camera",
      "cpu_cores": 1,
      "memory_mb": 512
    },
    {
      "id": "production-machine",
      "cpu_cores": 1,
      "memory_mb": 1024
    },
    {
      "id": "packaging-machine",
      "cpu_cores": 1,
      "memory_mb": 1024
    },
    {
      "id": "temperature-sensor",
      "cpu_cores": 1,
      "memory_mb": 100
    },
    {
      "id": "gateway",
      "cpu_cores": 2,
      "memory_mb": 2048
    },
    {
      "id": "factory-server",
      "cpu_cores": 2,
      "memory_mb": 4096
    },
    {
      "id": "central-office-server",
      "cpu_cores": 2,
      "memory_mb": 4096
    },
    {
      "id": "cloud",
      "cpu_cores": 4,
      "memory_mb": 8192
    }
  ],
  "connections": [
    {
      "from": "camera",
      "to": "gateway",
      "delay_ms_oneway": 1
    },
    {
      "from": "production-machine",
      "to": "gateway",
      "delay_ms_oneway": 1
    },
    {
      "from": "packaging-machine",
      "to": "gateway",
      "delay_ms_oneway": 1
    },
    {
      "from": "temperature-sensor",
      "to": "gateway",
      "delay_ms_oneway": 1
    },
    {
      "from": "gateway",
      "to": "factory-server",
      "delay_ms_oneway": 2
    },
    {
      "from": "factory-server",
      "to": "central-office-server",
      "delay_ms_oneway": 8
    },
    {
      "from": "factory-server",
      "to": "cloud",
      "delay_ms_oneway": 12
    },
    {
      "from": "central-office-server",
      "to": "cloud",
      "delay_ms_oneway": 10
    }
  ]
};

const ROUTED = {
  "machines": [
    {
      "id": "M1",
      "cpu_cores": 1,
      "memory_mb": 512
    },
    {
      "id": "M2",
      "cpu_cores": 1,
      "memory_mb": 512
    },
    {
      "id": "M3",
      "cpu_cores": 2,
      "memory_mb": 1024
    },
    {
      "id": "M4",
      "cpu_cores": 2,
      "memory_mb": 1024
    },
    {
      "id": "M5",
      "cpu_cores": 4,
      "memory_mb": 4096
    },
    {
      "id": "M6",
      "cpu_cores": 4,
      "memory_mb": 8192
    }
  ],
  "routers": [
    {
      "id": "R1"
    },
    {
      "id": "R2"
    }
  ],
  "connections": [
    {
      "from": "M1",
      "to": "R1",
      "delay_ms_oneway": 2,
      "rate_mbit": 100
    },
    {
      "from": "M2",
      "to": "R1",
      "delay_ms_oneway": 5,
      "rate_mbit": 100,
      "dispersion_ms": 1,
      "loss_pct": 1
    },
    {
      "from": "M3",
      "to": "R1",
      "delay_ms_oneway": 3
    },
    {
      "from": "R1",
      "to": "R2",
      "delay_ms_oneway": 4,
      "rate_mbit": 50,
      "dispersion_ms": 0.5,
      "loss_pct": 2
    },
    {
      "from": "M4",
      "to": "R2",
      "delay_ms_oneway": 2
    },
    {
      "from": "M5",
      "to": "R2",
      "delay_ms_oneway": 3
    },
    {
      "from": "M6",
      "to": "R2",
      "delay_ms_oneway": 1,
      "loss_pct": 0.5
    },
    {
      "from": "M3",
      "to": "M4",
      "delay_ms_oneway": 20,
      "rate_mbit": 10
    }
  ]
};

const SCHEDULE = {
  "initial": "INIT",
  "states": [
    {
      "name": "INIT",
      "transitions": [
        {
          "when": {
            "time": "20m"
          },
          "to": "MEMORY -20%"
        }
      ]
    },
    {
      "name": "MEMORY -20%",
      "infra_update": {
        "machines": [
          {
            "id": "*",
            "memory_scale": 0.8
          }
        ]
      },
      "transitions": [
        {
          "when": {
            "event": "memory error"
          },
          "to": "MEMORY RESET"
        },
        {
          "when": {
            "time": "20m"
          },
          "to": "HIGH LATENCY"
        }
      ]
    },
    {
      "name": "MEMORY RESET",
      "infra_update": {
        "reset": true
      },
      "transitions": [
        {
          "when": {
            "and": [
              {
                "event": "application started"
              },
              {
                "time": "1m"
              }
            ]
          },
          "to": "HIGH LATENCY"
        }
      ]
    },
    {
      "name": "HIGH LATENCY",
      "infra_update": {
        "reset": true,
        "links": [
          {
            "from": "R1",
            "to": "R2",
            "delay_ms_oneway": 40
          }
        ]
      },
      "transitions": [
        {
          "when": {
            "time": "20m"
          },
          "to": "FINAL"
        }
      ]
    },
    {
      "name": "FINAL"
    }
  ]
};

const EVENTS = [
  { at: "25m", name: "memory error" },
  { at: "25m 30s", name: "application started" },
];

const $ = (id) => document.getElementById(id);
const pretty = (v) => JSON.stringify(v, null, 2);

function fill(select, ids) {
  const keep = select.value;
  select.replaceChildren(...ids.map((id) => new Option(id, id)));
  if (ids.includes(keep)) select.value = keep;
}

function refreshMachines() {
  try {
    const ids = JSON.parse(machines($("infra").value));
    for (const s of ["from", "to", "agent"]) fill($(s), ids);
    if ($("to").selectedIndex === 0 && ids.length > 1) $("to").selectedIndex = ids.length - 1;
    $("infra-error").textContent = "";
  } catch (e) {
    $("infra-error").textContent = e.message ?? String(e);
  }
}

function load(model) {
  $("infra").value = pretty(model);
  $("updates").value = "[]";
  refreshMachines();
}

function showPath() {
  try {
    const r = JSON.parse(pathBetween($("infra").value, $("updates").value, $("from").value, $("to").value));
    const rows = [
      ["path", r.path.join(" → ")],
      ["delay", `${r.delay_ms} ms`],
      ["dispersion", `${r.dispersion_ms} ms`],
      ["rate", r.rate_mbit === null ? "unbounded" : `${r.rate_mbit} Mbit/s`],
      ["loss", `${r.loss_pct.toFixed(4)} %`],
      ["corruption", `${r.corruption_pct.toFixed(4)} %`],
      ["reorder", `${r.reorder_pct.toFixed(4)} %`],
      ["duplicate", `${r.duplicate_pct.toFixed(4)} %`],
    ];
    if (r.partitioned) rows.push(["partitioned", "yes"]);
    const table = document.createElement("table");
    for (const [k, v] of rows) {
      const tr = table.insertRow();
      tr.insertCell().textContent = k;
      tr.insertCell().textContent = v;
    }
    $("path-out").replaceChildren(table);
  } catch (e) {
    $("path-out").innerHTML = "";
    $("path-out").append(Object.assign(document.createElement("div"), { className: "error", textContent: e.message ?? String(e) }));
  }
}

function showPlan() {
  try {
    const r = JSON.parse(agentPlan($("infra").value, $("updates").value, $("agent").value, Number($("rtt").value)));
    $("plan-table").textContent = r.table;
    $("plan-script").textContent = r.script;
    $("plan-warn").textContent = r.warnings.join("\n");
  } catch (e) {
    $("plan-table").textContent = $("plan-script").textContent = "";
    $("plan-warn").textContent = e.message ?? String(e);
  }
}

function fmt(us) {
  const s = us / 1e6;
  return s >= 60 ? `${Math.floor(s / 60)}m ${Math.round(s % 60)}s` : `${s.toFixed(1)}s`;
}

function showReplay() {
  const timeline = $("timeline");
  timeline.replaceChildren();
  try {
    const jsonl = replaySchedule($("schedule").value, $("events").value);
    const lines = jsonl.trim().split("\n").map((l) => JSON.parse(l));
    const outcome = lines.pop();
    for (const v of lines) {
      const chip = document.createElement("span");
      chip.textContent = `${v.state} @ ${fmt(v.entered_us)}`;
      if (v.state === outcome.state) chip.className = outcome.outcome === "completed" && !/FAIL/.test(v.state) ? "end" : "fail";
      timeline.append(chip);
    }
    $("trace").textContent = jsonl;
  } catch (e) {
    $("trace").textContent = "";
    timeline.append(Object.assign(document.createElement("div"), { className: "error", textContent: e.message ?? String(e) }));
  }
}

await init();
$("schedule").value = pretty(SCHEDULE);
$("events").value = pretty(EVENTS);
load(FACTORY);
$("updates").value = pretty([{ links: [{ from: "factory-server", to: "cloud", delay_ms_oneway: 50 }] }]);
$("from").value = "factory-server";
$("to").value = "cloud";

$("infra").addEventListener("change", refreshMachines);
$("load-factory").addEventListener("click", () => load(FACTORY));
$("load-routed").addEventListener("click", () => load(ROUTED));
$("path-go").addEventListener("click", showPath);
$("plan-go").addEventListener("click", showPlan);
$("replay-go").addEventListener("click", showReplay);
showPath();
